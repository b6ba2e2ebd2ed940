"""Dense float64 network substrate: layers, ReLU, MSE, manual backprop, SGD.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Everything here
is a pure function of its inputs so results are bitwise reproducible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


def as_tensor(data, shape=None, check_finite: bool = True) -> np.ndarray:
    """Convert ``data`` to a contiguous float64 array.

    ``shape`` (optional) is checked against the result. With ``check_finite``
    NaN and Inf are rejected.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise DimensionError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class LayerKind:
    in_dim: int
    out_dim: int
    relu: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")

    def __str__(self):
        return f"{'DenseRelu' if self.relu else 'Dense'}({self.in_dim}, {self.out_dim})"


@dataclass
class DenseWeights:
    """Weight matrix ``W`` of shape [out, in] and bias ``b`` of shape [out]."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = as_tensor(self.W)
        self.b = as_tensor(self.b)
        if self.W.ndim != 2 or self.b.ndim != 1 or self.b.shape[0] != self.W.shape[0]:
            raise DimensionError(f"inconsistent weights W{self.W.shape} b{self.b.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def copy(self) -> "DenseWeights":
        return DenseWeights(self.W.copy(), self.b.copy())


def arch_from_sizes(sizes) -> list[LayerKind]:
    """Build an MLP architecture from layer sizes, ReLU on every hidden layer.

    >>> [str(k) for k in arch_from_sizes([3, 8, 1])]
    ['DenseRelu(3, 8)', 'Dense(8, 1)']
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ValueError("need at least an input and an output size")
    n = len(sizes) - 1
    return [LayerKind(sizes[i], sizes[i + 1], relu=i < n - 1) for i in range(n)]


def init_dense(kind: LayerKind, rng: np.random.Generator) -> DenseWeights:
    # He-normal for ReLU layers, Glorot-normal otherwise; zero bias.
    if kind.relu:
        std = np.sqrt(2.0 / kind.in_dim)
    else:
        std = np.sqrt(2.0 / (kind.in_dim + kind.out_dim))
    W = rng.normal(0.0, std, size=(kind.out_dim, kind.in_dim))
    return DenseWeights(W, np.zeros(kind.out_dim))


def _check_input(w: DenseWeights, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != w.in_dim:
        raise DimensionError(f"input shape {x.shape} does not match layer input {w.in_dim}")


def dense_forward(w: DenseWeights, x: np.ndarray, relu: bool = False) -> np.ndarray:
    """Return ``x @ W.T + b``, passed through ReLU when ``relu`` is set."""
    _check_input(w, x)
    out = x @ w.W.T + w.b
    if relu:
        np.maximum(out, 0.0, out=out)
    return out


def dense_backward(w: DenseWeights, x: np.ndarray, grad_out: np.ndarray, relu: bool = False):
    """Gradients of a dense layer with respect to ``W``, ``b`` and ``x``.

    The pre-activation is recomputed from ``x`` so callers only need to keep
    layer inputs around. Returns ``(grad_W, grad_b, grad_x)``.
    """
    _check_input(w, x)
    if grad_out.shape != (x.shape[0], w.out_dim):
        raise DimensionError(f"grad_out shape {grad_out.shape} != {(x.shape[0], w.out_dim)}")
    if relu:
        pre = x @ w.W.T + w.b
        grad_out = grad_out * (pre > 0.0)
    grad_W = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ w.W
    return grad_W, grad_b, grad_x


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error and its gradient ``2 (pred - target) / batch``."""
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff ** 2)) if diff.size else 0.0
    return loss, 2.0 * diff / max(diff.size, 1)


def sgd_step(params, grads, lr: float):
    """Plain gradient descent, ``p - lr * g`` for each pair. Returns new arrays."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    out = []
    for p, g in zip(params, grads, strict=True):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
        out.append(p - lr * g)
    return out
