"""Differentiable operations.

Each op computes its forward value with numpy and registers a closure that
maps the output cotangent to input cotangents. Broadcasting is limited to
Python scalars plus the explicit bias/channel forms of ``dense``,
``conv2d``, ``conv_transpose2d`` and ``add_channelwise``.
"""

from __future__ import annotations

from numbers import Real
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import ShapeError, Tensor, _shape_error, record


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise _shape_error(op, a.shape, b.shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    if isinstance(b, Real):
        c = float(b)
        return record("add_scalar", (a,), a.data + c, lambda g: (g,))
    if isinstance(a, Real):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def sub(a, b) -> Tensor:
    if isinstance(b, Real):
        return add(a, -float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, Real):
        c = float(b)
        return record("mul_scalar", (a,), a.data * c, lambda g: (g * c,))
    if isinstance(a, Real):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def square(a: Tensor) -> Tensor:
    x = a.data
    return record("square", (a,), x * x, lambda g: (2.0 * x * g,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = a.data
    return record("abs", (a,), np.abs(x), lambda g: (np.sign(x) * g,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    mask = x > 0
    return record("relu", (a,), np.where(mask, x, 0.0), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = expit(x)
    return record("silu", (a,), x * s, lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return record("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise ValueError("log: non-positive input")
    return record("log", (a,), np.log(x), lambda g: (g / x,))


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return record("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(p.shape for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", tuple(parts), out, backward)


def slice(a: Tensor, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing: ints and slices only."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (int, np.integer, type(Ellipsis))) and not hasattr(ix, "indices"):
            raise TypeError("slice: only ints, slices and Ellipsis are supported")
    shape = a.shape
    out = a.data[index].copy()

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return record("slice", (a,), out, backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return record("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return record("mean", (a,), np.array(a.data.mean()), lambda g: (np.full(shape, float(g) / n),))


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (n, fan_in) and ``w`` of shape (fan_in, fan_out)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise _shape_error("dense", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise _shape_error("dense", w.shape, b.shape)
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ wd.T if x.requires_grad else None, xd.T @ g if w.requires_grad else None]
        if b is not None:
            grads.append(g.sum(axis=0) if b.requires_grad else None)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("dense", inputs, out, backward)


def add_channelwise(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-(sample, channel) value ``v`` (n, c) to every pixel of ``x`` (n, c, h, w)."""
    if x.data.ndim != 4 or v.shape != x.shape[:2]:
        raise _shape_error("add_channelwise", x.shape, v.shape)
    return record(
        "add_channelwise",
        (x, v),
        x.data + v.data[:, :, None, None],
        lambda g: (g, g.sum(axis=(2, 3))),
    )


# -- convolutions -----------------------------------------------------------

def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(n, c, ho, wo, kh, kw) strided view of ``xp``."""
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(cols: np.ndarray, out_shape, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum (n, c, ho, wo, kh, kw) patches into ``out_shape``."""
    out = np.zeros(out_shape)
    _, _, ho, wo, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[..., i, j]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (n, c, h, w) with kernels ``w`` (o, c, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise _shape_error("conv2d", w.shape, b.shape)
    n, c, h, wd_ = x.shape
    o, _, kh, kw = w.shape
    p, s = padding, stride
    if h + 2 * p < kh or wd_ + 2 * p < kw:
        raise _shape_error("conv2d", x.shape, w.shape)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _windows(xp, kh, kw, s)
    wdat = w.data
    out = np.tensordot(cols, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, wdat, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gxp = _scatter_windows(gcols, xp.shape, s)
            gx = gxp[:, :, p:p + h, p:p + wd_] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv2d", inputs, out, backward)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution of ``x`` (n, c_in, h, w) with ``w`` (c_in, c_out, kh, kw).

    Output extent is ``(h - 1) * stride - 2 * padding + kh + output_padding``;
    the extra rows/columns sit at the bottom/right edge.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise _shape_error("conv_transpose2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise _shape_error("conv_transpose2d", w.shape, b.shape)
    if not 0 <= output_padding < max(stride, 1):
        raise ValueError(f"output_padding must lie in [0, stride), got {output_padding}")
    n, c, h, wd_ = x.shape
    _, o, kh, kw = w.shape
    p, s, op = padding, stride, output_padding
    full_h, full_w = (h - 1) * s + kh + op, (wd_ - 1) * s + kw + op
    if full_h - 2 * p <= 0 or full_w - 2 * p <= 0:
        raise _shape_error("conv_transpose2d", x.shape, w.shape)
    xd, wdat = x.data, w.data
    cols = np.tensordot(xd, wdat, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    full = _scatter_windows(cols, (n, o, full_h, full_w), s)
    out = full[:, :, p:full_h - p, p:full_w - p]
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        gcols = _windows(gfull, kh, kw, s)[:, :, :h, :wd_]
        gx = None
        if x.requires_grad:
            gx = np.tensordot(gcols, wdat, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        gw = np.tensordot(xd, gcols, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return record("conv_transpose2d", inputs, out, backward)


OP_KINDS = (
    "add", "mul", "matmul", "conv2d", "conv_transpose2d", "dense", "relu", "silu",
    "tanh", "exp", "log", "reshape", "concat", "sum", "mean", "slice",
)


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by name, e.g. ``forward_op("conv2d", x, w, stride=2, padding=1)``."""
    fn = globals().get(op_kind)
    if op_kind not in OP_KINDS and op_kind not in ("sub", "neg", "square", "abs", "add_channelwise"):
        raise ValueError(f"unknown op kind {op_kind!r}")
    return fn(*inputs, **kwargs)


__all__ = [
    "ShapeError", "add", "sub", "neg", "mul", "square", "abs", "relu", "silu", "tanh",
    "exp", "log", "reshape", "concat", "slice", "sum", "mean", "matmul", "dense",
    "add_channelwise", "conv2d", "conv_transpose2d", "forward_op", "OP_KINDS",
]
