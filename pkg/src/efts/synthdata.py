"""Synthetic few-shot datasets, episode/batch samplers and vector augmentations.

Classes are Gaussian blobs pushed through one fixed invertible warp
``x -> R2 g(R1 x)`` with random rotations ``R1, R2`` and the elementwise
monotone map ``g(u) = u + 0.5 sin(u)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SamplingError

SPLITS = ("base", "validation", "novel")
AUGMENTATIONS = ("original", "noise", "scale", "mask", "flip")

_MAGIC = b"EFTSDATA1\n"


@dataclass(frozen=True)
class DatasetSpec:
    n_base: int = 32
    n_validation: int = 16
    n_novel: int = 20
    samples_per_class: int = 60
    d_in: int = 16
    sigma_sep: float = 1.0
    sigma_in: float = 1.0
    warp_seed: int = 1234

    def validate(self) -> None:
        counts = (self.n_base, self.n_validation, self.n_novel, self.samples_per_class, self.d_in)
        if any(int(c) <= 0 for c in counts):
            raise ConfigError(f"dataset counts must be positive: {self}")
        if self.sigma_sep < 0 or self.sigma_in <= 0:
            raise ConfigError("need sigma_sep >= 0 and sigma_in > 0")

    @property
    def split_sizes(self) -> dict[str, int]:
        return {"base": self.n_base, "validation": self.n_validation, "novel": self.n_novel}


@dataclass(frozen=True, eq=False)
class Dataset:
    """``samples[c]`` holds the ``[n x d_in]`` samples of class ``c``."""

    spec: DatasetSpec
    seed: int
    samples: np.ndarray  # [n_classes, samples_per_class, d_in]
    splits: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.samples.shape[2]

    def classes(self, split: str) -> tuple[int, ...]:
        try:
            return self.splits[split]
        except KeyError:
            raise SamplingError(f"unknown split {split!r}") from None


@dataclass(frozen=True, eq=False)
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    way: int
    shot: int
    query: int
    classes: tuple[int, ...] = ()
    support_ids: tuple[tuple[int, int], ...] = ()  # (class, sample) pairs
    query_ids: tuple[tuple[int, int], ...] = ()

    def as_batch(self) -> "Batch":
        """Stack support then query rows; labels are the episode-local ones."""
        n_s = self.way * self.shot
        local = np.concatenate([self.support_y, self.query_y])
        view = EpisodeView(self.way, self.shot, self.query, np.arange(n_s),
                           np.arange(n_s, n_s + len(self.query_y)), local)
        return Batch(np.concatenate([self.support_x, self.query_x]), local, view)


@dataclass(frozen=True, eq=False)
class EpisodeView:
    way: int
    shot: int
    query: int
    support_idx: np.ndarray
    query_idx: np.ndarray
    local_labels: np.ndarray  # 0..way-1 for every row of the batch


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray  # class position within the sampled split
    view: EpisodeView | None = None


def _rotation(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def warp(x: np.ndarray, warp_seed: int) -> np.ndarray:
    rng = np.random.default_rng(warp_seed)
    d = x.shape[-1]
    r1, r2 = _rotation(rng, d), _rotation(rng, d)
    u = x @ r1.T
    return (u + 0.5 * np.sin(u)) @ r2.T


def generate_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    n_classes = spec.n_base + spec.n_validation + spec.n_novel
    means = rng.normal(0.0, spec.sigma_sep, size=(n_classes, spec.d_in)) if spec.sigma_sep > 0 \
        else np.zeros((n_classes, spec.d_in))
    noise = rng.normal(0.0, spec.sigma_in, size=(n_classes, spec.samples_per_class, spec.d_in))
    samples = warp(means[:, None, :] + noise, spec.warp_seed)
    splits, start = {}, 0
    for name in SPLITS:
        size = spec.split_sizes[name]
        splits[name] = tuple(range(start, start + size))
        start += size
    return Dataset(spec, seed, samples, splits)


def _require(dataset: Dataset, split: str, n_classes: int, per_class: int) -> tuple[int, ...]:
    classes = dataset.classes(split)
    if n_classes > len(classes):
        raise SamplingError(f"split {split!r} has {len(classes)} classes, need {n_classes}")
    if per_class > dataset.samples.shape[1]:
        raise SamplingError(f"need {per_class} samples per class, dataset has {dataset.samples.shape[1]}")
    return classes


def sample_episode(dataset: Dataset, split: str, way: int, shot: int, query: int,
                   rng: np.random.Generator) -> Episode:
    if way < 1 or shot < 1 or query < 1:
        raise SamplingError("way, shot and query must be >= 1")
    classes = _require(dataset, split, way, shot + query)
    chosen = rng.choice(len(classes), size=way, replace=False)
    s_ids, q_ids, s_x, q_x = [], [], [], []
    for pos in chosen:
        c = classes[pos]
        idx = rng.choice(dataset.samples.shape[1], size=shot + query, replace=False)
        s_ids.extend((c, int(i)) for i in idx[:shot])
        q_ids.extend((c, int(i)) for i in idx[shot:])
        s_x.append(dataset.samples[c, idx[:shot]])
        q_x.append(dataset.samples[c, idx[shot:]])
    return Episode(
        support_x=np.concatenate(s_x),
        support_y=np.repeat(np.arange(way), shot),
        query_x=np.concatenate(q_x),
        query_y=np.repeat(np.arange(way), query),
        way=way, shot=shot, query=query,
        classes=tuple(int(classes[p]) for p in chosen),
        support_ids=tuple(s_ids), query_ids=tuple(q_ids),
    )


def sample_batch(dataset: Dataset, split: str, way: int, shot: int, query: int,
                 rng: np.random.Generator) -> Batch:
    """Episode-shaped batch of ``(shot + query) * way`` rows: supports first, then queries."""
    ep = sample_episode(dataset, split, way, shot, query, rng)
    classes = dataset.classes(split)
    position = {c: i for i, c in enumerate(classes)}
    split_labels = np.array([position[c] for c in ep.classes])
    batch = ep.as_batch()
    return Batch(batch.inputs, split_labels[batch.labels], batch.view)


def sample_plain_batch(dataset: Dataset, split: str, size: int, rng: np.random.Generator) -> Batch:
    """Class-stratified batch without an episode view.

    At most ``size // 2`` classes are drawn so every class contributes at least two
    rows; per-class counts differ by at most one.
    """
    if size <= 0:
        raise ConfigError("batch size must be positive")
    classes = dataset.classes(split)
    if not classes:
        raise SamplingError(f"split {split!r} is empty")
    n_used = min(len(classes), max(1, size // 2))
    chosen = np.sort(rng.choice(len(classes), size=n_used, replace=False))
    counts = np.full(n_used, size // n_used)
    counts[rng.choice(n_used, size=size % n_used, replace=False)] += 1
    if counts.max() > dataset.samples.shape[1]:
        raise SamplingError(f"need {counts.max()} samples per class, dataset has {dataset.samples.shape[1]}")
    xs, ys = [], []
    for pos, n in zip(chosen, counts):
        idx = rng.choice(dataset.samples.shape[1], size=int(n), replace=False)
        xs.append(dataset.samples[classes[pos], idx])
        ys.append(np.full(int(n), pos))
    return Batch(np.concatenate(xs), np.concatenate(ys))


def augment(inputs: np.ndarray, strategy: str, rng: np.random.Generator,
            sigma: float = 0.1, rho: float = 0.25) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    n, d = x.shape
    if strategy == "original":
        return x.copy()
    if strategy == "noise":
        return x + sigma * rng.standard_normal(x.shape)
    if strategy == "scale":
        return x * rng.uniform(0.8, 1.2, size=(n, 1))
    if strategy == "mask":
        width = min(d, math.ceil(rho * d))
        starts = rng.integers(0, d - width + 1, size=n)
        cols = np.arange(d)
        keep = (cols < starts[:, None]) | (cols >= starts[:, None] + width)
        return x * keep
    if strategy == "flip":
        flipped = np.argsort(rng.random((n, d)), axis=1)[:, : d // 2]
        signs = np.ones((n, d))
        np.put_along_axis(signs, flipped, -1.0, axis=1)
        return x * signs
    raise ConfigError(f"unknown augmentation {strategy!r}; expected one of {AUGMENTATIONS}")


def save_dataset(dataset: Dataset, path) -> None:
    """Write ``magic``, one JSON header line, then the float64 little-endian body."""
    header = {
        "spec": asdict(dataset.spec),
        "seed": dataset.seed,
        "shape": list(dataset.samples.shape),
        "splits": {k: list(v) for k, v in dataset.splits.items()},
        "dtype": "<f8",
        "order": "C",
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(dataset.samples, dtype="<f8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ConfigError(f"{path} is not a dataset file")
    end = raw.index(b"\n", len(_MAGIC))
    header = json.loads(raw[len(_MAGIC):end])
    shape = tuple(header["shape"])
    body = np.frombuffer(raw[end + 1:], dtype="<f8")
    if body.size != math.prod(shape):
        raise ConfigError(f"{path}: body has {body.size} values, header says {shape}")
    splits = {k: tuple(v) for k, v in header["splits"].items()}
    return Dataset(DatasetSpec(**header["spec"]), header["seed"], body.reshape(shape).copy(), splits)
