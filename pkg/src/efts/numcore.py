"""Small MLP encoder with hand-written backward pass, SGD and a finite-difference oracle.

Everything is float64 numpy. Parameter containers are value-semantic: updates
return new objects and never mutate their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DIMS = (16, 64, 64, 32)


def as_matrix(x, cols: int | None = None, name: str = "inputs") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got shape {x.shape}")
    if cols is not None and x.shape[1] != cols:
        raise ShapeError(f"{name} has {x.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{name} contains non-finite values")
    return x


@dataclass(frozen=True, eq=False)
class EncoderParams:
    """Weights ``[out x in]`` and biases ``[out]`` per layer; ReLU between layers."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(f"layer {k} input {w.shape[1]} != previous output "
                                 f"{self.weights[k - 1].shape[0]}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d_emb(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    def replace(self, arrays: Sequence[np.ndarray]) -> "EncoderParams":
        arrays = list(arrays)
        return EncoderParams(tuple(arrays[0::2]), tuple(arrays[1::2]))

    def copy(self) -> "EncoderParams":
        return self.replace([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "EncoderParams":
        return self.replace([np.zeros_like(a) for a in self.arrays()])


# Gradients share the parameter layout.
Gradients = EncoderParams

P = TypeVar("P")


def init_encoder(dims: Sequence[int] = DEFAULT_DIMS, rng: np.random.Generator | None = None) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    if rng is None:
        rng = np.random.default_rng(0)
    if len(dims) < 2 or any(int(d) <= 0 for d in dims):
        raise ShapeError(f"bad encoder dims {dims}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(tuple(weights), tuple(biases))


@dataclass(frozen=True, eq=False)
class Tape:
    params: EncoderParams
    activations: tuple[np.ndarray, ...]  # input to each layer
    preacts: tuple[np.ndarray, ...]  # pre-nonlinearity output of each hidden layer


def encoder_forward(params: EncoderParams, inputs) -> tuple[np.ndarray, Tape]:
    x = as_matrix(inputs, params.d_in)
    activations, preacts = [], []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        activations.append(h)
        a = h @ w.T + b
        if k < last:
            preacts.append(a)
            h = np.maximum(a, 0.0)
        else:
            h = a
    return h, Tape(params, tuple(activations), tuple(preacts))


def encoder_backward(params: EncoderParams, tape: Tape, d_emb) -> Gradients:
    if tape.params is not params:
        raise ContractError("tape was recorded with a different parameter object")
    batch = tape.activations[0].shape[0]
    g = as_matrix(d_emb, params.d_emb, "upstream gradient")
    if g.shape[0] != batch:
        raise ShapeError(f"upstream gradient has {g.shape[0]} rows, tape has {batch}")
    dw, db = [None] * len(params.weights), [None] * len(params.weights)
    for k in range(len(params.weights) - 1, -1, -1):
        dw[k] = g.T @ tape.activations[k]
        db[k] = g.sum(axis=0)
        if k:
            g = (g @ params.weights[k]) * (tape.preacts[k - 1] > 0)
    return EncoderParams(tuple(dw), tuple(db))


def _check_congruent(params, grads):
    pa, ga = params.arrays(), grads.arrays()
    if len(pa) != len(ga) or any(p.shape != g.shape for p, g in zip(pa, ga)):
        raise ShapeError("gradients are not shape-congruent with parameters")
    return pa, ga


def sgd_step(params: P, grads: P, lr: float) -> P:
    """Return ``p - lr * g`` for every tensor; inputs are left untouched."""
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    if isinstance(params, np.ndarray):
        if np.shape(grads) != params.shape:
            raise ShapeError(f"gradient shape {np.shape(grads)} != {params.shape}")
        return params - lr * np.asarray(grads)
    pa, ga = _check_congruent(params, grads)
    return params.replace([p - lr * g for p, g in zip(pa, ga)])


def add_grads(a: P, b: P) -> P:
    pa, ga = _check_congruent(a, b)
    return a.replace([x + y for x, y in zip(pa, ga)])


def scale_grads(a: P, factor: float) -> P:
    return a.replace([factor * x for x in a.arrays()])


def finite_diff_grad(loss_fn: Callable[[P], float], params: P, eps: float = 1e-5) -> P:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    if isinstance(params, np.ndarray) or np.isscalar(params):
        base = [np.array(params, dtype=np.float64)]
        rebuild = lambda arrs: arrs[0]
    else:
        base = [a.copy() for a in params.arrays()]
        rebuild = params.replace
    out = [np.zeros_like(a) for a in base]
    for k, arr in enumerate(base):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + eps
            fp = float(loss_fn(rebuild([a.copy() for a in base])))
            arr[idx] = orig - eps
            fm = float(loss_fn(rebuild([a.copy() for a in base])))
            arr[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while perturbing tensor {k} at {idx}")
            out[k][idx] = (fp - fm) / (2.0 * eps)
    return rebuild(out)


def max_relative_error(a, b, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor) over all coordinates of two param trees or arrays."""
    la = a.arrays() if hasattr(a, "arrays") else [np.asarray(a)]
    lb = b.arrays() if hasattr(b, "arrays") else [np.asarray(b)]
    worst = 0.0
    for x, y in zip(la, lb):
        if x.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
