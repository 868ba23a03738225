"""Differentiable tensor operations.

Binary ops never broadcast: operands must have identical shapes. The only
exceptions are the explicit ``scale`` (tensor times Python scalar) and
``bias_add`` (per-feature / per-channel bias) ops.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .core import Tensor, ShapeError, as_tensor, check_shape, graph_of


def _emit(tag, inputs, out, bwd) -> Tensor:
    g = graph_of(*inputs)
    if g is None:
        return Tensor(out)
    return g.record(tag, inputs, out, bwd)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _emit("negate", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    x = a.data
    dx = np.where(x > 0, 1.0, slope)
    dx[x == 0] = 0.0  # subgradient at exactly 0 is 0
    out = x * dx
    return _emit("leaky_relu", (a,), out, lambda g: (g * dx,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    x = a.data
    return _emit("softplus", (a,), np.logaddexp(0.0, x), lambda g: (g * _sigmoid(x),))


_UNARY = {"negate": negate, "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softplus": softplus}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(tag: str, a, b=None, *, slope: float = 0.2, factor: Optional[float] = None) -> Tensor:
    """Dispatch an elementwise op by tag (``leaky_relu`` takes ``slope``,
    ``scale`` takes ``factor``)."""
    if tag in _BINARY:
        if b is None:
            raise ValueError(f"{tag} needs two operands")
        return _BINARY[tag](a, b)
    if tag in _UNARY:
        return _UNARY[tag](a)
    if tag == "leaky_relu":
        return leaky_relu(a, slope)
    if tag == "scale":
        if factor is None:
            raise ValueError("scale needs a factor")
        return scale(a, factor)
    raise ValueError(f"unknown elementwise op {tag!r}")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.graph is not None, b.graph is not None

    def bwd(g):
        return (g @ bd.T if need_a else None, ad.T @ g if need_b else None)

    return _emit("matmul", (a, b), ad @ bd, bwd)


def bias_add(x, b) -> Tensor:
    """Add a bias along axis 1 (features of a rank-2 tensor, channels of rank-4)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not fit axis 1 of {x.shape}")
    if x.ndim == 2:
        out = x.data + b.data
        return _emit("bias_add", (x, b), out, lambda g: (g, g.sum(axis=0)))
    out = x.data + b.data[None, :, None, None]
    return _emit("bias_add", (x, b), out, lambda g: (g, g.sum(axis=(0, 2, 3))))


# -- reductions and shape ops -----------------------------------------------

def reduce_sum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit("sum", (x,), np.sum(x.data), lambda g: (np.full(shape, float(g)),))


def reduce_mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return _emit("mean", (x,), np.mean(x.data), lambda g: (np.full(shape, float(g) / n),))


def reduce(tag: str, x) -> Tensor:
    if tag == "sum":
        return reduce_sum(x)
    if tag == "mean":
        return reduce_mean(x)
    raise ValueError(f"unknown reduction {tag!r}")


def concat(xs: Sequence, axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    if axis < 0:
        axis += len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != axis):
            raise ShapeError(f"concat along axis {axis}: {ref} vs {x.shape}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", xs, out, bwd)


def slice_batch(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the batch axis."""
    x = as_tensor(x)
    n = x.shape[0]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_batch [{start}:{stop}] out of range for batch {n}")
    shape = x.shape

    def bwd(g):
        dx = np.zeros(shape)
        dx[start:stop] = g
        return (dx,)

    return _emit("slice_batch", (x,), x.data[start:stop].copy(), bwd)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = check_shape(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape cannot map {x.shape} to {shape}")
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(x) -> Tensor:
    """Collapse every axis after the batch axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], x.size // x.shape[0]))


# -- losses and fused helpers -----------------------------------------------

def squared_l2(a, b) -> Tensor:
    """Sum of squared differences."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("squared_l2", a, b)
    diff = a.data - b.data
    return _emit("squared_l2", (a, b), np.sum(diff * diff),
                 lambda g: (2.0 * g * diff, -2.0 * g * diff))


def log_softmax(x) -> Tensor:
    """Row-wise log-softmax of a rank-2 tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"log_softmax needs rank 2, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(out)
    return _emit("log_softmax", (x,), out, lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def batch_norm(x, gamma, beta, eps: float = 1e-5, mean=None, var=None):
    """Normalize per feature (rank 2) or per channel (rank 4).

    With ``mean``/``var`` omitted, batch statistics are used and returned
    alongside the output so callers can keep running averages. Otherwise
    the supplied statistics are applied as constants.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_norm needs rank 2 or 4, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} vs channels {c}")

    train = mean is None
    if train:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    mean, var = np.asarray(mean, dtype=np.float64), np.asarray(var, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    gam = gamma.data.reshape(bshape)
    out = gam * xhat + beta.data.reshape(bshape)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gam
        if train:
            dx = inv.reshape(bshape) * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    y = _emit("batch_norm", (x, gamma, beta), out, bwd)
    return y, mean, var
