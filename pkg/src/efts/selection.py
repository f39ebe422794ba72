"""Affinity-based task selection.

Each candidate task is trained for ``M`` windows of ``UNA`` SGD steps starting
from a common snapshot. A window's affinity is the relative drop of the summed
ProtoNet loss on a fixed pool of evaluation episodes; the candidate's score is
the mean over its windows. The ``Q`` best-scoring tasks form the training subset.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateDenominatorError, EftsError, NumericError
from .evalhead import center_normalize
from .numcore import EncoderParams, encoder_forward, sgd_step
from .synthdata import Episode
from .tasks import StepBatches, TaskHeadParams, TaskId, protonet_loss, task_loss, task_rng

EPS_DEN = 1e-12
EVAL_SCALE = 10.0  # logit multiplier on centred, unit-norm embeddings


@dataclass(frozen=True, eq=False)
class EvalTaskPool:
    episodes: tuple[Episode, ...]

    def __post_init__(self):
        if not self.episodes:
            raise ContractError("evaluation pool needs at least one episode")


@dataclass(frozen=True, eq=False)
class TrainState:
    encoder: EncoderParams
    heads: Mapping[int, TaskHeadParams] = field(default_factory=dict)

    def copy(self) -> "TrainState":
        return TrainState(self.encoder.copy(), {k: h.copy() for k, h in self.heads.items()})


@dataclass(frozen=True, eq=False)
class Snapshot:
    state: TrainState
    label: str = ""

    def restore(self) -> TrainState:
        return self.state.copy()


def take_snapshot(state: TrainState, label: str = "") -> Snapshot:
    return Snapshot(state.copy(), label)


@dataclass(frozen=True)
class AffinityRecord:
    task: int
    window: int  # 1..M
    z: float
    step: int
    loss_pre: float
    loss_post: float


@dataclass(frozen=True)
class AffinityScore:
    task: TaskId
    z_hat: float
    records: tuple[AffinityRecord, ...] = ()


def eval_pool_loss(encoder: EncoderParams, pool: EvalTaskPool, scale: float | None = EVAL_SCALE) -> float:
    """Sum of per-episode ProtoNet losses; all episodes are embedded in one pass.

    Unless ``scale`` is None, each episode's embeddings are centred on the support
    mean, L2-normalised and the logits multiplied by ``scale``, so the loss cannot be
    lowered by merely shrinking the encoder output.
    """
    batches = [ep.as_batch() for ep in pool.episodes]
    z, _ = encoder_forward(encoder, np.concatenate([b.inputs for b in batches]))
    total, start = 0.0, 0
    for b in batches:
        stop = start + b.inputs.shape[0]
        ze = z[start:stop]
        if scale is not None:
            s, q = center_normalize(ze[b.view.support_idx], ze[b.view.query_idx])
            ze = np.concatenate([s, q]) * np.sqrt(scale)
        total += protonet_loss(ze, b.view).loss
        start = stop
    return total


def affinity_window(loss_pre: float, loss_post: float, eps: float = EPS_DEN) -> float:
    if not loss_pre > eps:
        raise DegenerateDenominatorError(f"evaluation loss {loss_pre!r} too small for an affinity ratio")
    return 1.0 - loss_post / loss_pre


def averaged_affinity(values: Iterable[float]) -> float:
    values = list(values)
    if not values:
        raise ContractError("need at least one affinity window")
    return float(np.mean(values))


def score_candidate(task: TaskId, snapshot: Snapshot, batches: Sequence[StepBatches],
                    pool: EvalTaskPool, una: int, m: int, lr: float,
                    step: int = 0, key: Sequence[int] = (0,)) -> AffinityScore:
    """Lookahead-train one task from ``snapshot`` and average its ``m`` window affinities."""
    if una < 1 or m < 1:
        raise ConfigError("UNA and M must be >= 1")
    if len(batches) < una * m:
        raise ContractError(f"need {una * m} lookahead batches, got {len(batches)}")
    state = snapshot.restore()
    encoder, heads = state.encoder, dict(state.heads)
    records = []
    try:
        for i in range(m):
            pre = eval_pool_loss(encoder, pool)
            for u in range(una):
                j = i * una + u
                res = task_loss(task, batches[j], encoder, heads, task_rng(tuple(key) + (j,), task))
                encoder = sgd_step(encoder, res.d_encoder, lr)
                if res.d_head is not None and task.index in heads:
                    heads[task.index] = sgd_step(heads[task.index], res.d_head, lr)
            post = eval_pool_loss(encoder, pool)
            if not (np.isfinite(pre) and np.isfinite(post)):
                raise NumericError("non-finite evaluation loss during lookahead")
            z = affinity_window(pre, post)
            records.append(AffinityRecord(task.index, i + 1, z, step + i * una, pre, post))
    except EftsError as exc:
        raise type(exc)(f"while scoring {task.label}: {exc}") from exc
    return AffinityScore(task, averaged_affinity(r.z for r in records), tuple(records))


def select_top_q(scores: Sequence[AffinityScore], q: int) -> tuple[TaskId, ...]:
    """The ``q`` highest scores (ties to the lower task index), returned in index order."""
    if not 1 <= q <= len(scores):
        raise ConfigError(f"Q must lie in 1..{len(scores)}, got {q}")
    ranked = sorted(scores, key=lambda s: (-s.z_hat, s.task.index))
    return tuple(sorted((s.task for s in ranked[:q]), key=lambda t: t.index))


@dataclass(frozen=True)
class SelectionResult:
    subset: tuple[TaskId, ...]
    scores: tuple[AffinityScore, ...]

    @property
    def records(self) -> list[AffinityRecord]:
        return [r for s in self.scores for r in s.records]


def run_selection(state: TrainState, tasks: Sequence[TaskId], batches: Sequence[StepBatches],
                  pool: EvalTaskPool, una: int, m: int, q: int, lr: float,
                  step: int = 0, key: Sequence[int] = (0,), workers: int = 1) -> SelectionResult:
    """Score every task from one snapshot of ``state`` on the same batches; keep the top ``q``.

    ``state`` itself is never modified. With ``workers > 1`` candidates are scored
    in threads; the result is identical to sequential scoring.
    """
    if not tasks:
        raise ConfigError("task set is empty")
    if not 1 <= q <= len(tasks):
        raise ConfigError(f"Q must lie in 1..{len(tasks)}, got {q}")
    snapshot = take_snapshot(state, f"step{step}")

    def score(task):
        return score_candidate(task, snapshot, batches, pool, una, m, lr, step, key)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            scores = list(pool_exec.map(score, tasks))
    else:
        scores = [score(t) for t in tasks]
    scores.sort(key=lambda s: s.task.index)
    return SelectionResult(select_top_q(scores, q), tuple(scores))


TRACE_COLUMNS = ("event", "step", "task", "window", "z", "loss_pre", "loss_post")


def write_affinity_trace(path, events: Sequence[tuple[int, SelectionResult]]) -> int:
    """One CSV row per affinity record; returns the number of rows written."""
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for event, (sel_step, result) in enumerate(events):
            for r in result.records:
                w.writerow([event, r.step, r.task, r.window, repr(r.z), repr(r.loss_pre), repr(r.loss_post)])
                n += 1
    return n
