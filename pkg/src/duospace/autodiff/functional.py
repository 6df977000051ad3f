"""Differentiable ops over :class:`~duospace.autodiff.tensor.Tensor`.

Elementwise ops broadcast like NumPy; their backward rules sum the incoming
gradient over broadcast axes.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy import special

from .tensor import ShapeError, Tensor, as_tensor, check_finite, record

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "abs",
    "relu", "gelu", "sigmoid", "log_sigmoid", "tanh", "softmax", "layernorm",
    "matmul", "concat", "stack", "getitem", "reshape", "transpose", "swapaxes",
    "sum", "mean", "maximum", "minimum", "clamp", "where", "broadcast_to",
    "upsample_nearest2d", "square",
]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(op: str, a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{op}: at least one operand must be a Tensor")
    dtype = a.dtype if isinstance(a, Tensor) else b.dtype
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=dtype), dtype=dtype)
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=dtype), dtype=dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None
    check_finite(op, (a.data, b.data))
    return a, b


# -- elementwise binary -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("div", out, (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair("maximum", a, b)
    mask = a.data >= b.data
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape
    return record("maximum", out, (a, b),
                  lambda g: (_unbroadcast(g * mask, sa), _unbroadcast(g * ~mask, sb)))


def minimum(a, b) -> Tensor:
    a, b = _pair("minimum", a, b)
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape
    return record("minimum", out, (a, b),
                  lambda g: (_unbroadcast(g * mask, sa), _unbroadcast(g * ~mask, sb)))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    x = as_tensor(x)
    check_finite("clamp", (x.data,))
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return record("clamp", out, (x,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair("where", a, b)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape
    return record("where", out, (a, b),
                  lambda g: (_unbroadcast(g * cond, sa), _unbroadcast(g * ~cond, sb)))


# -- elementwise unary ---------------------------------------------------------
def _unary(op, x, fwd, dfn):
    x = as_tensor(x)
    check_finite(op, (x.data,))
    out = fwd(x.data)
    return record(op, out, (x,), lambda g: (g * dfn(x.data, out),))


def neg(x) -> Tensor:
    x = as_tensor(x)
    return record("neg", -x.data, (x,), lambda g: (-g,))


def power(x, exponent: float) -> Tensor:
    p = float(exponent)
    return _unary("power", x, lambda d: d ** p, lambda d, o: p * d ** (p - 1))


def square(x) -> Tensor:
    return _unary("square", x, np.square, lambda d, o: 2.0 * d)


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda d, o: o)


def log(x) -> Tensor:
    return _unary("log", x, np.log, lambda d, o: 1.0 / d)


def sqrt(x) -> Tensor:
    return _unary("sqrt", x, np.sqrt, lambda d, o: 0.5 / o)


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _unary("abs", x, np.abs, lambda d, o: np.sign(d))


def relu(x) -> Tensor:
    # subgradient at 0 is 0
    return _unary("relu", x, lambda d: np.maximum(d, 0), lambda d, o: (d > 0).astype(d.dtype))


def tanh(x) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda d, o: 1.0 - o * o)


def sigmoid(x) -> Tensor:
    return _unary("sigmoid", x, special.expit, lambda d, o: o * (1.0 - o))


def log_sigmoid(x) -> Tensor:
    """``log(sigmoid(x))`` evaluated without overflow."""
    return _unary("log_sigmoid", x, lambda d: -np.logaddexp(0, -d), lambda d, o: special.expit(-d))


_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    def fwd(d):
        return 0.5 * d * (1.0 + special.erf(d / _SQRT_2))

    def dfn(d, o):
        return 0.5 * (1.0 + special.erf(d / _SQRT_2)) + d * _INV_SQRT_2PI * np.exp(-0.5 * d * d)

    return _unary("gelu", x, fwd, dfn)


# -- normalisation -----------------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    check_finite("softmax", (x.data,))
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), bw)


def layernorm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis`` (no affine part)."""
    x = as_tensor(x)
    check_finite("layernorm", (x.data,))
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return record("layernorm", y, (x,), bw)


# -- linear algebra -----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul: scalar operands are not allowed")
    if a.ndim == 1 or b.ndim == 1:
        raise ShapeError(f"matmul: expects >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    check_finite("matmul", (a.data, b.data))
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return record("matmul", ad @ bd, (a, b), bw)


# -- structure ---------------------------------------------------------------------
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    check_finite("concat", (t.data for t in tensors))
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return record("concat", out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"stack: shapes {ref} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record("stack", out, tensors, bw)


def getitem(x, index) -> Tensor:
    """Basic and integer-array indexing (the ``slice`` op)."""
    x = as_tensor(x)
    if isinstance(index, Tensor):
        raise TypeError("getitem: index with a numpy array, not a Tensor")
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {x.shape}: {exc}") from None
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return record("slice", np.array(out, copy=True), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                  lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def swapaxes(x, a: int, b: int) -> Tensor:
    axes = list(range(as_tensor(x).ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None
    src = x.shape
    return record("broadcast_to", out, (x,), lambda g: (_unbroadcast(g, src),))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    check_finite("sum", (x.data,))
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    check_finite("mean", (x.data,))
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("mean", np.asarray(out), (x,), bw)


def upsample_nearest2d(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes by an integer factor."""
    x = as_tensor(x)
    f = int(factor)
    out = x.data.repeat(f, axis=-2).repeat(f, axis=-1)
    shape = x.shape

    def bw(g):
        h, w = shape[-2], shape[-1]
        g = g.reshape(g.shape[:-2] + (h, f, w, f))
        return (g.sum(axis=(-3, -1)),)

    return record("upsample_nearest2d", out, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y
