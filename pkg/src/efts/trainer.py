"""Training loop: pre-sampled data, task selection at configured steps, joint SGD."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, EftsError, NumericError
from .evalhead import EvalReport, evaluate
from .numcore import DEFAULT_DIMS, EncoderParams, init_encoder, sgd_step
from .selection import EvalTaskPool, SelectionResult, TrainState, run_selection
from .synthdata import Dataset, sample_batch, sample_episode, sample_plain_batch
from .tasks import SUPCON_TAU, StepBatches, TaskHeadParams, TaskId, init_heads, multi_task_loss

log = logging.getLogger(__name__)

MODES = ("efts", "random", "all-tasks", "single")

# Seed-stream tags: every random decision draws from default_rng([seed, tag, ...]).
STREAM_TRAIN, STREAM_LOOKAHEAD, STREAM_POOL, STREAM_INIT = 0, 1, 2, 3
STREAM_SUBSET, STREAM_RANDOM, STREAM_TASK, STREAM_VALID, STREAM_TEST = 4, 5, 6, 7, 8


@dataclass(frozen=True)
class EftsConfig:
    lr0: float = 0.05
    decay: float = 0.1
    decay_steps: tuple[int, ...] | None = None  # None: 60% and 80% of max_itr
    una: int = 50
    m: int = 4
    q: int = 2
    selection_steps: tuple[int, ...] = (0,)
    pool_size: int = 50
    way: int = 8
    shot: int = 5
    query: int = 3
    strategy: str = "A"
    plain_batch_size: int = 0  # strategy B; 0 means (shot + query) * way
    max_itr: int = 300
    seed: int = 0
    eval_way: int = 5
    eval_shot: int = 1
    eval_query: int = 15
    eval_episodes: int = 200
    eval_every: int = 0
    eval_head: str = "protonet"
    tau: float = SUPCON_TAU
    dims: tuple[int, ...] = DEFAULT_DIMS
    workers: int = 1

    def validate(self, n_tasks: int | None = None) -> None:
        counts = dict(una=self.una, m=self.m, q=self.q, pool_size=self.pool_size, way=self.way,
                      shot=self.shot, query=self.query, max_itr=self.max_itr,
                      eval_way=self.eval_way, eval_shot=self.eval_shot, eval_query=self.eval_query,
                      eval_episodes=self.eval_episodes, workers=self.workers)
        bad = [k for k, v in counts.items() if int(v) < 1]
        if bad:
            raise ConfigError(f"must be positive: {', '.join(bad)}")
        if self.lr0 < 0 or self.decay < 0 or self.tau <= 0:
            raise ConfigError("lr0 and decay must be >= 0, tau > 0")
        if self.strategy not in ("A", "B"):
            raise ConfigError(f"strategy must be A or B, got {self.strategy!r}")
        if any(not 0 <= t < self.max_itr for t in self.selection_steps):
            raise ConfigError(f"selection steps must lie in [0, {self.max_itr})")
        if n_tasks is not None and not 1 <= self.q <= n_tasks:
            raise ConfigError(f"Q={self.q} must lie in 1..{n_tasks}")

    @property
    def boundaries(self) -> tuple[int, ...]:
        if self.decay_steps is not None:
            return tuple(sorted(self.decay_steps))
        return (int(0.6 * self.max_itr), int(0.8 * self.max_itr))

    @property
    def batch_size(self) -> int:
        return (self.shot + self.query) * self.way


def selection_schedule(spec: str, max_itr: int) -> tuple[int, ...]:
    """``none``, ``once`` (= ``0``), ``every:K`` or a comma list of steps."""
    spec = spec.strip().lower()
    if spec in ("", "none"):
        return ()
    if spec == "once":
        return (0,)
    if spec.startswith("every:"):
        try:
            k = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad selection interval {spec!r}") from None
        if k < 1:
            raise ConfigError("selection interval must be >= 1")
        return tuple(range(0, max_itr, k))
    try:
        return tuple(sorted({int(s) for s in spec.split(",")}))
    except ValueError:
        raise ConfigError(f"bad selection schedule {spec!r}") from None


def lr_at(config: EftsConfig, step: int) -> float:
    crossed = sum(step >= b for b in config.boundaries)
    return config.lr0 * config.decay ** crossed


def random_subset(tasks: Sequence[TaskId], q: int, rng: np.random.Generator) -> tuple[TaskId, ...]:
    if not 1 <= q <= len(tasks):
        raise ConfigError(f"Q={q} must lie in 1..{len(tasks)}")
    picked = rng.choice(len(tasks), size=q, replace=False)
    return tuple(sorted((tasks[i] for i in picked), key=lambda t: t.index))


def stream_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed)] + [int(t) for t in tags])


class BatchStream:
    """Deterministic stand-in for a pre-sampled batch list: ``at(step)`` is a pure
    function of (dataset, config, stream tag, step)."""

    def __init__(self, dataset: Dataset, config: EftsConfig, tag: int = STREAM_TRAIN):
        self.dataset, self.config, self.tag = dataset, config, tag

    def at(self, *step: int) -> StepBatches:
        cfg = self.config
        rng = stream_rng(cfg.seed, self.tag, *step)
        episodic = sample_batch(self.dataset, "base", cfg.way, cfg.shot, cfg.query, rng)
        plain = None
        if cfg.strategy == "B":
            plain = sample_plain_batch(self.dataset, "base", cfg.plain_batch_size or cfg.batch_size, rng)
        return StepBatches(episodic, plain)

    def lookahead(self, step: int) -> list[StepBatches]:
        n = self.config.una * self.config.m
        return [self.at(step, j) for j in range(n)]


def build_pool(dataset: Dataset, config: EftsConfig, split: str = "validation") -> EvalTaskPool:
    rng = stream_rng(config.seed, STREAM_POOL)
    eps = tuple(sample_episode(dataset, split, config.eval_way, config.eval_shot, config.eval_query, rng)
                for _ in range(config.pool_size))
    return EvalTaskPool(eps)


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    selections: list[tuple[int, SelectionResult | None, tuple[int, ...]]] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)

    def subsets(self) -> list[dict]:
        return [{"step": t, "subset": list(sub)} for t, _, sub in self.selections]

    def write_steps(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "subset", "loss"])
            for row in self.steps:
                w.writerow([row["step"], repr(row["lr"]), "|".join(map(str, row["subset"])), repr(row["loss"])])

    def write_evals(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "accuracy", "ci95"])
            for row in self.evals:
                w.writerow([row["step"], repr(row["accuracy"]), repr(row["ci95"])])

    def write_scores(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "task", "label", "z_hat", "selected"])
            for t, res, sub in self.selections:
                if res is None:
                    continue
                for s in res.scores:
                    w.writerow([t, s.task.index, s.task.label, repr(s.z_hat), int(s.task.index in sub)])


@dataclass
class TrainResult:
    encoder: EncoderParams
    heads: dict[int, TaskHeadParams]
    log: TrainLog
    report: EvalReport | None = None


def parse_mode(mode: str) -> tuple[str, int | None]:
    if mode.startswith("single:"):
        try:
            return "single", int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad mode {mode!r}") from None
    if mode not in MODES or mode == "single":
        raise ConfigError(f"mode must be efts, random, all-tasks or single:<id>; got {mode!r}")
    return mode, None


def init_state(config: EftsConfig, tasks: Sequence[TaskId], d_in: int) -> TrainState:
    rng = stream_rng(config.seed, STREAM_INIT)
    dims = (d_in,) + tuple(config.dims[1:])
    encoder = init_encoder(dims, rng)
    return TrainState(encoder, init_heads(tasks, encoder.d_emb, rng))


def train(config: EftsConfig, dataset: Dataset, tasks: Sequence[TaskId], mode: str = "efts",
          eval_dataset: Dataset | None = None, eval_split: str = "validation",
          final_eval: bool = True) -> TrainResult:
    """Run the full schedule. ``eval_dataset``/``eval_split`` choose where the
    affinity episodes come from (defaults to this dataset's validation split)."""
    kind, single = parse_mode(mode)
    tasks = tuple(sorted(tasks, key=lambda t: t.index))
    config.validate(len(tasks))
    if len({t.index for t in tasks}) != len(tasks):
        raise ConfigError("task indices must be unique")
    by_index = {t.index: t for t in tasks}
    if single is not None and single not in by_index:
        raise ConfigError(f"mode {mode!r} names an unknown task")

    state = init_state(config, tasks, dataset.d_in)
    encoder, heads = state.encoder, dict(state.heads)
    subset = random_subset(tasks, config.q, stream_rng(config.seed, STREAM_SUBSET))
    if kind == "all-tasks":
        subset = tasks
    elif kind == "single":
        subset = (by_index[single],)
    selection_steps = set(config.selection_steps) if kind in ("efts", "random") else set()

    stream = BatchStream(dataset, config, STREAM_TRAIN)
    lookahead = BatchStream(dataset, config, STREAM_LOOKAHEAD)
    pool = build_pool(eval_dataset if eval_dataset is not None else dataset, config, eval_split) \
        if kind == "efts" and selection_steps else None
    tlog = TrainLog()
    tlog.selections.append((-1, None, tuple(t.index for t in subset)))

    for t in range(config.max_itr):
        lr = lr_at(config, t)
        if t in selection_steps:
            if kind == "efts":
                try:
                    result = run_selection(TrainState(encoder, heads), tasks, lookahead.lookahead(t), pool,
                                           config.una, config.m, config.q, lr, step=t,
                                           key=(config.seed, STREAM_LOOKAHEAD, t), workers=config.workers)
                except EftsError as exc:
                    raise type(exc)(f"selection at step {t}: {exc}") from exc
                subset = result.subset
            else:
                result = None
                subset = random_subset(tasks, config.q, stream_rng(config.seed, STREAM_RANDOM, t))
            tlog.selections.append((t, result, tuple(s.index for s in subset)))
            log.info("step %d: subset %s", t, [s.label for s in subset])

        try:
            res = multi_task_loss(subset, stream.at(t), encoder, heads, (config.seed, STREAM_TASK, t), config.tau)
        except EftsError as exc:
            raise type(exc)(f"training step {t}: {exc}") from exc
        if not np.isfinite(res.loss):
            raise NumericError(f"non-finite training loss at step {t}")
        encoder = sgd_step(encoder, res.d_encoder, lr)
        for idx, g in res.d_heads.items():
            heads[idx] = sgd_step(heads[idx], g, lr)
        tlog.steps.append({"step": t, "lr": lr, "subset": [s.index for s in subset], "loss": res.loss})

        if config.eval_every and (t + 1) % config.eval_every == 0:
            rep = evaluate(encoder, dataset, "validation", config.eval_head, config.eval_episodes,
                           config.eval_way, config.eval_shot, config.eval_query,
                           stream_rng(config.seed, STREAM_VALID))
            tlog.evals.append({"step": t + 1, "accuracy": rep.accuracy, "ci95": rep.ci95})

    report = None
    if final_eval:
        report = evaluate(encoder, dataset, "novel", config.eval_head, config.eval_episodes,
                          config.eval_way, config.eval_shot, config.eval_query,
                          stream_rng(config.seed, STREAM_TEST))
    return TrainResult(encoder, heads, tlog, report)


def with_overrides(config: EftsConfig, **kw) -> EftsConfig:
    return replace(config, **kw)
