"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient back to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .tensor import ShapeError, Tensor, as_tensor, record_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _check_axis(op: str, ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data
    return record_op("add", out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("subtract", a, b)
    out = a.data - b.data
    return record_op("subtract", out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("multiply", a, b)
    out = a.data * b.data

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return record_op("multiply", out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product."""
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    return record_op("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ndim = tensors[0].ndim
    axis = _check_axis("concat", ndim, axis)
    for t in tensors[1:]:
        same = t.ndim == ndim and all(
            t.shape[d] == tensors[0].shape[d] for d in range(ndim) if d != axis)
        if not same:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op("concat", out, tensors, bw)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast shape {a.shape} to {shape}") from None
    return record_op("broadcast", out, (a,), lambda g: (unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return record_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]`` along axis 0; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.intp)
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for shape {a.shape}")
    out = a.data[index]

    def bw(g):
        # scatter-add as a sparse (rows x picks) product; far faster than np.add.at
        picks = sparse.csr_matrix((np.ones(index.size, dtype=g.dtype), (index, np.arange(index.size))),
                                  shape=(a.shape[0], index.size))
        return (np.asarray(picks @ g.reshape(index.size, -1)).reshape(a.shape),)

    return record_op("gather_rows", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope <= 1.0:
        raise ValueError(f"leaky_relu: slope must be in [0, 1], got {slope}")
    s = a.dtype.type(slope)
    out = np.maximum(a.data, a.data * s)
    scale = (a.data > 0) * (1 - s) + s
    return record_op("leaky_relu", out, (a,), lambda g: (g * scale,))


def max_over_axis(a: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis``; gradient flows to the first (lowest-index) maximiser."""
    axis = _check_axis("max_over_axis", a.ndim, axis)
    if a.shape[axis] == 0:
        raise ShapeError(f"max_over_axis: empty axis {axis} in shape {a.shape}")
    out = a.data.max(axis=axis)
    slices = np.moveaxis(a.data, axis, 0)
    # first-occurrence masks: the lowest index wins ties
    hits = np.empty(slices.shape, dtype=bool)
    taken = np.zeros(out.shape, dtype=bool)
    idx = np.zeros(out.shape, dtype=np.intp)
    for j in range(slices.shape[0]):
        h = hits[j]
        np.equal(slices[j], out, out=h)
        h &= ~taken
        taken |= h
        if j:
            idx += h * j

    def bw(g):
        ga = np.empty_like(a.data)
        gm = np.moveaxis(ga, axis, 0)
        for j in range(gm.shape[0]):
            np.multiply(g, hits[j], out=gm[j])
        return (ga,)

    return record_op("max_over_axis", out, (a,), bw), idx


def sum_over_axis(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        out = np.asarray(a.data.sum(), dtype=a.dtype).reshape((1,) * a.ndim if keepdims else ())
        return record_op("sum", out, (a,), lambda g: (np.broadcast_to(g.reshape(()), a.shape).copy(),))
    axis = _check_axis("sum_over_axis", a.ndim, axis)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum_over_axis", out, (a,), bw)


def mean_over_axis(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[_check_axis("mean_over_axis", a.ndim, axis)]
    s = sum_over_axis(a, axis, keepdims)
    return multiply(s, np.asarray(1.0 / n, dtype=a.dtype))


@dataclass
class BatchNormState:
    """Per-channel learnable scale/shift plus running statistics."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: Optional[BatchNormState] = None,
              training: bool = True, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Normalise each channel (last axis) over all leading axes.

    In training mode, batch statistics are used and ``state`` running
    statistics are updated in place; in eval mode the running statistics are used.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: channel mismatch, input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    flat = x.data.reshape(-1, c)
    m = flat.shape[0]
    if training:
        if m < 2:
            raise ShapeError(f"batchnorm: training mode needs at least 2 rows per channel, got {m}")
        mean = flat.mean(axis=0)
        centered = flat - mean
        var = np.einsum("ij,ij->j", centered, centered) / m
        if state is not None:
            state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mean
            state.running_var[...] = (1 - momentum) * state.running_var + momentum * var * (m / (m - 1))
    else:
        if state is None:
            raise ValueError("batchnorm: eval mode needs running statistics")
        mean = state.running_mean.astype(x.dtype, copy=False)
        var = state.running_var.astype(x.dtype, copy=False)
        centered = flat - mean
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered
    xhat *= inv_std
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bw(g):
        g2 = g.reshape(-1, c)
        dgamma = np.einsum("ij,ij->j", g2, xhat)
        dbeta = g2.sum(axis=0)
        scale = gamma.data * inv_std
        dx = g2 * scale
        if training:
            # dx = scale * (g - mean(g) - xhat * mean(g * xhat))
            dx -= scale * dbeta / m
            dx -= xhat * (scale * dgamma / m)
        return dx.reshape(x.shape), dgamma, dbeta

    return record_op("batchnorm", out, (x, gamma, beta), bw)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None, training: bool = True) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return record_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", x.ndim, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record_op("log_softmax", out, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def nll_loss(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log likelihood of integer ``labels`` under row-wise ``log_probs``."""
    labels = np.asarray(labels, dtype=np.intp)
    n, c = log_probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"nll_loss: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"nll_loss: label out of range [0, {c})")
    onehot = np.zeros((n, c), dtype=log_probs.dtype)
    onehot[np.arange(n), labels] = -1.0 / n
    return sum_over_axis(multiply(log_probs, onehot))


def cross_entropy(scores: Tensor, labels: np.ndarray) -> Tensor:
    return nll_loss(log_softmax(scores, axis=1), labels)
