"""Candidate training tasks: losses over encoder embeddings with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .numcore import (EncoderParams, Gradients, add_grads, as_matrix, encoder_backward,
                      encoder_forward, scale_grads)
from .synthdata import AUGMENTATIONS, Batch, EpisodeView, augment

TASK_KINDS = ("protonet", "nca", "classification", "supcon", "constant")
SUPCON_TAU = 0.1


@dataclass(frozen=True)
class TaskId:
    """One entry of the candidate task set.

    ``shuffle_labels`` permutes the class labels of every batch (a deliberately
    useless classification task); ``ascent`` flips the sign of every gradient the
    task produces. Both exist to build adversarial candidates.
    """

    index: int
    kind: str
    views: tuple[str, str] = ("original", "original")
    n_classes: int = 0
    shuffle_labels: bool = False
    ascent: bool = False

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.index < 1:
            raise ConfigError("task index must be >= 1")
        if self.kind == "classification" and self.n_classes < 1:
            raise ConfigError("classification task needs n_classes >= 1")
        if self.kind == "supcon" and any(v not in AUGMENTATIONS for v in self.views):
            raise ConfigError(f"unknown augmentation in {self.views}")

    @property
    def episodic(self) -> bool:
        return self.kind == "protonet"

    @property
    def label(self) -> str:
        text = f"task{self.index}:{self.kind}"
        if self.kind == "supcon":
            text += ":" + "+".join(self.views)
        elif self.kind == "classification":
            text += f":{self.n_classes}"
        if self.shuffle_labels:
            text += ":shuffled"
        if self.ascent:
            text += ":ascent"
        return text


def parse_task(index: int, text: str, n_base: int, d_emb: int) -> TaskId:
    """Parse ``protonet``, ``nca``, ``constant``, ``classification:<base|emb|N>[:shuffled]``
    or ``supcon:<view>+<view>``; any of them may end in ``:ascent``."""
    parts = [p.strip() for p in text.strip().split(":") if p.strip()]
    if not parts:
        raise ConfigError(f"empty task description for task{index}")
    kind, args = parts[0], parts[1:]
    ascent = "ascent" in args
    args = [a for a in args if a != "ascent"]
    if kind in ("protonet", "nca", "constant"):
        if args:
            raise ConfigError(f"task{index}: {kind} takes no options, got {args}")
        return TaskId(index, kind, ascent=ascent)
    if kind == "classification":
        shuffled = "shuffled" in args
        args = [a for a in args if a != "shuffled"]
        if len(args) != 1:
            raise ConfigError(f"task{index}: classification needs one class-count option")
        size = {"base": n_base, "emb": d_emb}.get(args[0])
        if size is None:
            try:
                size = int(args[0])
            except ValueError:
                raise ConfigError(f"task{index}: bad class count {args[0]!r}") from None
        return TaskId(index, kind, n_classes=size, shuffle_labels=shuffled, ascent=ascent)
    if kind == "supcon":
        if len(args) != 1 or args[0].count("+") != 1:
            raise ConfigError(f"task{index}: supcon needs one '<view>+<view>' option")
        return TaskId(index, kind, views=tuple(args[0].split("+")), ascent=ascent)
    raise ConfigError(f"task{index}: unknown task kind {kind!r}")


def default_tasks(n_base: int, d_emb: int) -> tuple[TaskId, ...]:
    """ProtoNet, NCA, two classification heads and SupCon over six view pairs."""
    tasks = [
        TaskId(1, "protonet"),
        TaskId(2, "nca"),
        TaskId(3, "classification", n_classes=n_base),
        TaskId(4, "classification", n_classes=d_emb),
    ]
    pairs = list(combinations(AUGMENTATIONS, 2))[:6]
    tasks += [TaskId(5 + k, "supcon", views=pair) for k, pair in enumerate(pairs)]
    return tuple(tasks)


@dataclass(frozen=True, eq=False)
class TaskHeadParams:
    """Task-specific parameters: classifier ``weight [C x d] + bias`` or a SupCon
    projection ``weight [d_proj x d]``; empty for ProtoNet/NCA."""

    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        return [a for a in (self.weight, self.bias) if a is not None]

    def replace(self, arrays: Sequence[np.ndarray]) -> "TaskHeadParams":
        arrays = list(arrays)
        weight = arrays.pop(0) if self.weight is not None else None
        bias = arrays.pop(0) if self.bias is not None else None
        return TaskHeadParams(self.kind, weight, bias)

    def copy(self) -> "TaskHeadParams":
        return self.replace([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "TaskHeadParams":
        return self.replace([np.zeros_like(a) for a in self.arrays()])


def init_head(task: TaskId, d_emb: int, rng: np.random.Generator) -> TaskHeadParams:
    if task.kind == "classification":
        a = np.sqrt(6.0 / (task.n_classes + d_emb))
        return TaskHeadParams(task.kind, rng.uniform(-a, a, (task.n_classes, d_emb)), np.zeros(task.n_classes))
    if task.kind == "supcon":
        a = np.sqrt(6.0 / (2 * d_emb))
        return TaskHeadParams(task.kind, rng.uniform(-a, a, (d_emb, d_emb)))
    return TaskHeadParams(task.kind)


def init_heads(tasks: Sequence[TaskId], d_emb: int, rng: np.random.Generator) -> dict[int, TaskHeadParams]:
    return {t.index: init_head(t, d_emb, rng) for t in tasks}


@dataclass(frozen=True, eq=False)
class TaskLossResult:
    loss: float
    d_embeddings: np.ndarray
    d_head: TaskHeadParams | None = None
    d_encoder: Gradients | None = None


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _logsumexp(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    return m + np.log(np.exp(logits - m[:, None]).sum(axis=1))


def protonet_loss(embeddings, view: EpisodeView | None) -> TaskLossResult:
    """Mean query cross-entropy over logits ``-||q - prototype||^2``."""
    if view is None:
        raise ContractError("protonet loss needs an episode view")
    z = as_matrix(embeddings, name="embeddings")
    s_idx, q_idx, y = view.support_idx, view.query_idx, view.local_labels
    if len(q_idx) == 0:
        raise ContractError("episode has no queries")
    onehot_s = np.eye(view.way)[y[s_idx]]  # [S x N]
    counts = onehot_s.sum(axis=0)
    if np.any(counts == 0):
        raise ContractError("every class needs at least one support sample")
    protos = (onehot_s.T @ z[s_idx]) / counts[:, None]
    q = z[q_idx]
    diff = q[:, None, :] - protos[None, :, :]
    logits = -np.einsum("qnd,qnd->qn", diff, diff)
    logp = _log_softmax(logits)
    yq = y[q_idx]
    nq = len(q_idx)
    loss = -logp[np.arange(nq), yq].mean()

    g = (np.exp(logp) - np.eye(view.way)[yq]) / nq  # dL/dlogits
    d_q = -2.0 * np.einsum("qn,qnd->qd", g, diff)
    d_protos = 2.0 * np.einsum("qn,qnd->nd", g, diff)
    grad = np.zeros_like(z)
    grad[q_idx] += d_q
    grad[s_idx] += (onehot_s / counts) @ d_protos
    return TaskLossResult(float(loss), grad)


def nca_loss(embeddings, labels) -> TaskLossResult:
    """Soft-neighbour loss: each sample should pick a same-class neighbour under a
    softmax over ``-||z_i - z_j||^2``. Samples without a same-class partner are skipped."""
    z = as_matrix(embeddings, name="embeddings")
    y = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ContractError("NCA needs at least 2 samples")
    diff = z[:, None, :] - z[None, :, :]
    dist = np.einsum("ijd,ijd->ij", diff, diff)
    eye = np.eye(n, dtype=bool)
    same = (y[:, None] == y[None, :]) & ~eye
    valid = same.any(axis=1)
    if not valid.any():
        return TaskLossResult(0.0, np.zeros_like(z))
    logits = np.where(eye, -np.inf, -dist)
    p = np.exp(_log_softmax(logits))
    pos_logits = np.where(same, logits, -np.inf)
    pos_logits[~valid] = 0.0
    qmat = np.where(valid[:, None], np.exp(_log_softmax(pos_logits)), 0.0)  # softmax over positives
    per_sample = _logsumexp(logits) - _logsumexp(pos_logits)
    n_valid = int(valid.sum())
    loss = per_sample[valid].sum() / n_valid

    # dL/dlogit_ij = (p_ij - q_ij) / n_valid with q the softmax restricted to positives
    g_logits = np.where(valid[:, None], p - qmat, 0.0) / n_valid
    g_dist = -g_logits
    sym = g_dist + g_dist.T
    grad = 2.0 * (sym.sum(axis=1)[:, None] * z - sym @ z)
    return TaskLossResult(float(loss), grad)


def classification_loss(embeddings, labels, head: TaskHeadParams) -> TaskLossResult:
    """Softmax cross-entropy through a linear head; returns head gradients too."""
    if head.kind != "classification" or head.weight is None:
        raise ContractError("classification loss needs a classification head")
    z = as_matrix(embeddings, head.weight.shape[1], "embeddings")
    y = np.asarray(labels)
    n_cls = head.weight.shape[0]
    if y.min(initial=0) < 0 or y.max(initial=0) >= n_cls:
        raise ContractError(f"labels must lie in 0..{n_cls - 1}")
    logits = z @ head.weight.T + head.bias
    logp = _log_softmax(logits)
    n = z.shape[0]
    loss = -logp[np.arange(n), y].mean()
    g = (np.exp(logp) - np.eye(n_cls)[y]) / n
    d_head = TaskHeadParams(head.kind, g.T @ z, g.sum(axis=0))
    return TaskLossResult(float(loss), g @ head.weight, d_head)


def supcon_loss(view1, view2, labels, tau: float = SUPCON_TAU,
                head: TaskHeadParams | None = None) -> TaskLossResult:
    """Supervised contrastive loss over ``2B`` anchors built from two views.

    Features go through the optional linear projection and are L2-normalised.
    ``d_embeddings`` is returned stacked as ``[view1; view2]``.
    """
    if tau <= 0:
        raise ContractError("temperature must be positive")
    v = np.concatenate([as_matrix(view1, name="view1"), as_matrix(view2, name="view2")])
    y = np.tile(np.asarray(labels), 2)
    if len(y) != v.shape[0]:
        raise ContractError("views must be row-aligned with labels")
    proj = head.weight if head is not None and head.weight is not None else None
    h = v @ proj.T if proj is not None else v
    norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), 1e-12)
    u = h / norms
    n = u.shape[0]
    eye = np.eye(n, dtype=bool)
    pos = (y[:, None] == y[None, :]) & ~eye
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        raise ContractError("no anchor in the batch has a positive")
    sim = np.where(eye, -np.inf, u @ u.T / tau)
    logp = _log_softmax(sim)
    n_valid = int(valid.sum())
    per_anchor = -np.where(pos, logp, 0.0).sum(axis=1) / np.maximum(n_pos, 1)
    loss = per_anchor[valid].sum() / n_valid

    p = np.exp(logp)
    target = np.where(pos, 1.0, 0.0) / np.maximum(n_pos, 1)[:, None]
    g_sim = np.where(valid[:, None], p - target, 0.0) / n_valid
    d_u = (g_sim + g_sim.T) @ u / tau
    d_h = (d_u - u * np.einsum("id,id->i", u, d_u)[:, None]) / norms
    if proj is not None:
        d_v = d_h @ proj
        d_head = TaskHeadParams(head.kind, d_h.T @ v)
    else:
        d_v, d_head = d_h, (head.zeros_like() if head is not None else None)
    return TaskLossResult(float(loss), d_v, d_head)


@dataclass(frozen=True, eq=False)
class StepBatches:
    """Data for one update: the shared episode batch and, for strategy B, a
    separate plain batch used by non-episodic tasks."""

    episodic: Batch
    plain: Batch | None = None

    def for_task(self, task: TaskId) -> Batch:
        if task.episodic or self.plain is None:
            return self.episodic
        return self.plain


def _negate(result: TaskLossResult) -> TaskLossResult:
    return TaskLossResult(
        result.loss,
        -result.d_embeddings,
        scale_grads(result.d_head, -1.0) if result.d_head is not None else None,
        scale_grads(result.d_encoder, -1.0) if result.d_encoder is not None else None,
    )


def task_loss(task: TaskId, batch: Batch | StepBatches, encoder: EncoderParams,
              heads: Mapping[int, TaskHeadParams], rng: np.random.Generator,
              tau: float = SUPCON_TAU) -> TaskLossResult:
    """Embed the batch, evaluate the task's loss and backpropagate into the encoder."""
    if isinstance(batch, StepBatches):
        batch = batch.for_task(task)
    head = heads.get(task.index)
    if task.kind == "supcon":
        x1 = augment(batch.inputs, task.views[0], rng)
        x2 = augment(batch.inputs, task.views[1], rng)
        z, tape = encoder_forward(encoder, np.concatenate([x1, x2]))
        b = batch.inputs.shape[0]
        res = supcon_loss(z[:b], z[b:], batch.labels, tau, head)
    else:
        z, tape = encoder_forward(encoder, batch.inputs)
        if task.kind == "protonet":
            if batch.view is None:
                raise ContractError(f"{task.label} needs an episode-shaped batch")
            res = protonet_loss(z, batch.view)
        elif task.kind == "nca":
            res = nca_loss(z, batch.labels)
        elif task.kind == "classification":
            labels = rng.permutation(batch.labels) if task.shuffle_labels else batch.labels
            if head is None:
                raise ContractError(f"{task.label} has no head parameters")
            res = classification_loss(z, labels, head)
        else:  # constant: a loss with zero gradient everywhere
            res = TaskLossResult(1.0, np.zeros_like(z), head.zeros_like() if head is not None else None)
    if not np.isfinite(res.loss):
        raise NumericError(f"{task.label}: non-finite loss")
    res = replace(res, d_encoder=encoder_backward(encoder, tape, res.d_embeddings))
    return _negate(res) if task.ascent else res


def task_rng(key: Sequence[int], task: TaskId) -> np.random.Generator:
    """Independent stream per (key, task) so results do not depend on evaluation order."""
    return np.random.default_rng([int(k) for k in key] + [task.index])


@dataclass(frozen=True, eq=False)
class MultiTaskResult:
    loss: float
    d_encoder: Gradients
    d_heads: dict[int, TaskHeadParams] = field(default_factory=dict)
    losses: dict[int, float] = field(default_factory=dict)


def multi_task_loss(subset: Sequence[TaskId], batch: Batch | StepBatches, encoder: EncoderParams,
                    heads: Mapping[int, TaskHeadParams], key: Sequence[int],
                    tau: float = SUPCON_TAU) -> MultiTaskResult:
    """Unweighted sum of the member task losses and gradients."""
    if not subset:
        raise ContractError("task subset must be nonempty")
    total, d_enc, d_heads, losses = 0.0, None, {}, {}
    for task in sorted(subset, key=lambda t: t.index):
        res = task_loss(task, batch, encoder, heads, task_rng(key, task), tau)
        total += res.loss
        d_enc = res.d_encoder if d_enc is None else add_grads(d_enc, res.d_encoder)
        if res.d_head is not None:
            d_heads[task.index] = res.d_head
        losses[task.index] = res.loss
    return MultiTaskResult(total, d_enc, d_heads, losses)
