"""Dense float64 kernels with hand-written backward passes.

Every op used by the model has a ``*_forward`` / ``*_backward`` pair. The
backward functions take the upstream gradient plus whatever the forward pass
needs to remember, and return the downstream gradient. Parameter gradients are
accumulated in place on :class:`Param`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    pass


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ShapeError(f"param {self.name}: expected a 2-d matrix, got shape {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def copy(self) -> "Param":
        p = Param(self.name, self.value.copy())
        p.grad[...] = self.grad
        p.adam_m[...] = self.adam_m
        p.adam_v[...] = self.adam_v
        return p


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {x.shape}")
    return x


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grad.fill(0.0)


# --- affine ---------------------------------------------------------------

def affine_forward(x: np.ndarray, w: Param, b: Param) -> np.ndarray:
    din, dout = w.shape
    if x.ndim != 2 or x.shape[1] != din:
        raise ShapeError(f"affine: input shape {x.shape} does not conform to weight shape {w.shape}")
    if b.shape != (1, dout):
        raise ShapeError(f"affine: bias shape {b.shape} does not conform to weight shape {w.shape}")
    return x @ w.value + b.value


def affine_backward(dout: np.ndarray, x: np.ndarray, w: Param, b: Param) -> np.ndarray:
    w.grad += x.T @ dout
    b.grad += dout.sum(axis=0, keepdims=True)
    return dout @ w.value.T


# --- relu -----------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, dout, 0.0)


# --- softmax --------------------------------------------------------------

def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    # J^T v for each row: s * (v - <v, s>)
    return out * (dout - (dout * out).sum(axis=1, keepdims=True))


def softmax_column(x: np.ndarray) -> np.ndarray:
    """Softmax of a length-T vector (normalizes over time)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_column_backward(dout: np.ndarray, out: np.ndarray) -> np.ndarray:
    return out * (dout - np.dot(dout, out))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --- cross-entropy --------------------------------------------------------

def _check_target(y: np.ndarray) -> None:
    if np.any(y < 0) or abs(float(y.sum()) - 1.0) > 1e-6:
        raise ValueError(f"cross-entropy target must be a probability vector, got sum {float(y.sum())!r}")


def cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    """-sum(y * log p) with p clamped at LOG_EPS."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_target(y)
    return float(-np.sum(y * np.log(np.maximum(p, LOG_EPS))))


def cross_entropy_backward(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy` with respect to ``p``."""
    p = np.asarray(p, dtype=np.float64)
    return np.where(p > LOG_EPS, -y / np.maximum(p, LOG_EPS), 0.0)


# --- optimizer ------------------------------------------------------------

def adam_step(params: Iterable[Param], lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    if t < 1:
        raise ValueError(f"adam step count must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.adam_m / c1
        v_hat = p.adam_v / c2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
