"""Few-shot evaluation heads and accuracy reports."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .numcore import EncoderParams, encoder_forward
from .synthdata import Dataset, sample_episode

HEADS = ("protonet", "lr")
LR_HEAD_STEPS = 100
LR_HEAD_RATE = 0.01


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def center_normalize(support: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Subtract the support mean from both sets, then L2-normalise every nonzero row."""
    mean = support.mean(axis=0)
    return l2_normalize(support - mean), l2_normalize(query - mean)


def nearest_centroid_predict(support: np.ndarray, support_labels, query: np.ndarray) -> np.ndarray:
    y = np.asarray(support_labels)
    n_cls = int(y.max()) + 1
    centroids = np.stack([support[y == c].mean(axis=0) for c in range(n_cls)])
    d = ((query[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)  # first minimum wins ties


def fit_logistic(features: np.ndarray, labels, steps: int = LR_HEAD_STEPS,
                 lr: float = LR_HEAD_RATE) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Multinomial logistic regression by full-batch gradient descent from zero.

    Returns weights, bias and the training loss before each step plus the final one.
    """
    if steps < 1:
        raise ConfigError("logistic head needs at least one step")
    y = np.asarray(labels)
    n_cls = int(y.max()) + 1
    n, d = features.shape
    w, b = np.zeros((n_cls, d)), np.zeros(n_cls)
    onehot = np.eye(n_cls)[y]
    history = []
    for _ in range(steps + 1):
        logits = features @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        history.append(float(-np.log(p[np.arange(n), y]).mean()))
        if len(history) > steps:
            break
        g = (p - onehot) / n
        w -= lr * g.T @ features
        b -= lr * g.sum(axis=0)
    return w, b, history


def lr_head_fit_predict(support: np.ndarray, support_labels, query: np.ndarray,
                        steps: int = LR_HEAD_STEPS, lr: float = LR_HEAD_RATE) -> np.ndarray:
    w, b, _ = fit_logistic(support, support_labels, steps, lr)
    return np.argmax(query @ w.T + b, axis=1)


@dataclass(frozen=True)
class EvalReport:
    head: str
    way: int
    shot: int
    query: int
    episodes: int
    accuracy: float  # percent
    ci95: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def row(self) -> str:
        return f"{self.head:>8} {self.way}-way {self.shot}-shot  {self.accuracy:.2f} ± {self.ci95:.2f}"


def summarize(head: str, way: int, shot: int, query: int, accuracies) -> EvalReport:
    acc = 100.0 * np.asarray(accuracies, dtype=np.float64)
    ci = 1.96 * acc.std() / np.sqrt(len(acc))
    return EvalReport(head, way, shot, query, len(acc), float(acc.mean()), float(ci))


def evaluate(encoder: EncoderParams, dataset: Dataset, split: str = "novel", head: str = "protonet",
             episodes: int = 500, way: int = 5, shot: int = 1, query: int = 15,
             rng: np.random.Generator | None = None) -> EvalReport:
    if head not in HEADS:
        raise ConfigError(f"unknown head {head!r}; expected one of {HEADS}")
    if rng is None:
        rng = np.random.default_rng(0)
    accs = []
    for _ in range(episodes):
        ep = sample_episode(dataset, split, way, shot, query, rng)
        z, _ = encoder_forward(encoder, np.concatenate([ep.support_x, ep.query_x]))
        s, q = z[: len(ep.support_y)], z[len(ep.support_y):]
        if head == "protonet":
            s, q = center_normalize(s, q)
            pred = nearest_centroid_predict(s, ep.support_y, q)
        else:
            pred = lr_head_fit_predict(l2_normalize(s), ep.support_y, l2_normalize(q))
        accs.append(np.mean(pred == ep.query_y))
    return summarize(head, way, shot, query, accs)
