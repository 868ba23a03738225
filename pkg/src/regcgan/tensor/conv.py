"""2-D convolution (cross-correlation) and its adjoint, via im2col."""

from __future__ import annotations

import numpy as np

from .core import Tensor, ShapeError, as_tensor
from .ops import _emit


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if stride < 1 or span < 0 or span % stride:
        raise ShapeError(
            f"conv geometry gives non-integral output: ({size} + 2*{pad} - {kernel}) / {stride} + 1"
        )
    return span // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size - 1) * stride - 2 * pad + kernel
    if stride < 1 or pad < 0 or out < 1:
        raise ShapeError(
            f"transposed conv geometry invalid: ({size} - 1)*{stride} - 2*{pad} + {kernel} = {out}"
        )
    return out


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold ``x`` [N,C,H,W] into columns [C*kh*kw, N*Ho*Wo]."""
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo))
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + hspan:stride, j:j + wspan:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, pad: int,
           ho: int, wo: int) -> np.ndarray:
    """Scatter-add columns back into an [N,C,H,W] array (adjoint of im2col)."""
    n, c, h, w = shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    xt = np.zeros((c, n, h + 2 * pad, w + 2 * pad))
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            xt[:, :, i:i + hspan:stride, j:j + wspan:stride] += cols[:, i, j]
    xt = xt[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(xt.transpose(1, 0, 2, 3))


def _check_kernel(x: Tensor, w: Tensor, b, op: str, channel_axis: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"{op} needs rank-4 input and kernel, got {x.shape} and {w.shape}")
    if w.shape[0 if channel_axis == 0 else 1] != x.shape[1]:
        raise ShapeError(f"{op}: kernel {w.shape} does not accept {x.shape[1]} input channels")
    out_c = w.shape[1 if channel_axis == 0 else 0]
    if b is not None and b.shape != (out_c,):
        raise ShapeError(f"{op}: bias {b.shape} does not match {out_c} output channels")


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` [N,C,H,W] with ``w`` [O,C,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_kernel(x, w, b, "conv2d", channel_axis=1)
    n = x.shape[0]
    o, _, kh, kw = w.shape
    cols, ho, wo = im2col(x.data, kh, kw, stride, pad)
    w2 = w.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    xshape, wshape = x.shape, w.shape
    need_x, need_w = x.graph is not None, w.graph is not None

    def bwd(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (gt @ cols.T).reshape(wshape) if need_w else None
        dx = col2im(w2.T @ gt, xshape, kh, kw, stride, pad, ho, wo) if need_x else None
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, out, bwd)


def conv2d_transpose(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` with the same kernel.

    ``w`` keeps the conv2d layout [C_x, C_out, kh, kw]: it is the kernel of
    the forward convolution that maps C_out channels to C_x channels.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = None if b is None else as_tensor(b)
    _check_kernel(x, w, b, "conv2d_transpose", channel_axis=0)
    n, cx, h, wd = x.shape
    _, co, kh, kw = w.shape
    ho = deconv_output_size(h, kh, stride, pad)
    wo = deconv_output_size(wd, kw, stride, pad)
    w2 = w.data.reshape(cx, -1)
    xt = x.data.transpose(1, 0, 2, 3).reshape(cx, -1)
    out = col2im(w2.T @ xt, (n, co, ho, wo), kh, kw, stride, pad, h, wd)
    if b is not None:
        out += b.data[None, :, None, None]
    wshape = w.shape
    need_x, need_w = x.graph is not None, w.graph is not None

    def bwd(g):
        gcols, _, _ = im2col(g, kh, kw, stride, pad)
        dx = (w2 @ gcols).reshape(cx, n, h, wd).transpose(1, 0, 2, 3) if need_x else None
        dw = (xt @ gcols.T).reshape(wshape) if need_w else None
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d_transpose", inputs, out, bwd)
