"""Strided N-d convolutions computed as one matmul per kernel offset.

Inputs are ``(B, C, *spatial)``; weights follow the ``(C_out, C_in, *kernel)``
layout for convolution and ``(C_in, C_out, *kernel)`` for the transposed op.
Accumulation runs over kernel offsets in a fixed order, so results are
deterministic for a fixed BLAS thread count.
"""
from __future__ import annotations

import itertools
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, check_finite, record

__all__ = ["conv2d", "conv3d", "conv_transpose2d", "conv_nd"]


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _window(arr: np.ndarray, offset: tuple[int, ...], stride: int, out: tuple[int, ...]):
    sl = tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offset, out))
    return arr[(slice(None), slice(None)) + sl]


def _taps(w: np.ndarray) -> np.ndarray:
    """Weight as ``(*kernel, C_out, C_in)`` so every per-offset slice is contiguous for BLAS."""
    return np.ascontiguousarray(np.moveaxis(w, (0, 1), (-2, -1)))


def _conv_forward(xt: np.ndarray, w: np.ndarray, stride: int, out_sp: tuple[int, ...]) -> np.ndarray:
    """``xt`` is the padded input laid out ``(C_in, B, *sp)``; returns ``(C_out, B*prod(out))``."""
    c_in, b = xt.shape[:2]
    c_out = w.shape[0]
    n_out = b * int(np.prod(out_sp))
    taps = _taps(w)
    acc = np.zeros((c_out, n_out), dtype=xt.dtype)
    for offset in itertools.product(*(range(k) for k in w.shape[2:])):
        cols = _window(xt, offset, stride, out_sp).reshape(c_in, n_out)
        acc += taps[offset] @ cols
    return acc


def _conv_adjoint(g2: np.ndarray, w: np.ndarray, stride: int, out_sp: tuple[int, ...],
                  padded_shape: tuple[int, ...]) -> np.ndarray:
    """Adjoint of :func:`_conv_forward` w.r.t. the padded input."""
    gx = np.zeros(padded_shape, dtype=g2.dtype)
    c_in, b = padded_shape[:2]
    taps_t = np.ascontiguousarray(np.moveaxis(w, (1, 0), (-2, -1)))  # (*kernel, C_in, C_out)
    for offset in itertools.product(*(range(k) for k in w.shape[2:])):
        contrib = (taps_t[offset] @ g2).reshape((c_in, b) + out_sp)
        _window(gx, offset, stride, out_sp)[...] += contrib
    return gx


def _weight_grad(g2: np.ndarray, xt: np.ndarray, kshape: tuple[int, ...], stride: int,
                 out_sp: tuple[int, ...]) -> np.ndarray:
    c_in, b = xt.shape[:2]
    c_out = g2.shape[0]
    n_out = b * int(np.prod(out_sp))
    gw = np.zeros(kshape + (c_out, c_in), dtype=xt.dtype)
    for offset in itertools.product(*(range(k) for k in kshape)):
        cols = _window(xt, offset, stride, out_sp).reshape(c_in, n_out)
        gw[offset] = g2 @ cols.T
    return np.ascontiguousarray(np.moveaxis(gw, (-2, -1), (0, 1)))


def _pad(x: np.ndarray, pad: int, nsp: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * nsp)


def conv_nd(x, weight, bias=None, stride: int = 1, padding: int = 0, *, op: str = "conv") -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    nsp = weight.ndim - 2
    if x.ndim != nsp + 2:
        raise ShapeError(f"{op}: input {x.shape} needs {nsp + 2} dims for weight {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"{op}: input channels {x.shape} do not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"{op}: bias {bias.shape} does not match weight {weight.shape}")
    check_finite(op, (x.data, weight.data) + ((bias.data,) if bias is not None else ()))
    stride, padding = int(stride), int(padding)
    kshape = weight.shape[2:]
    out_sp = tuple(_out_size(n, k, stride, padding) for n, k in zip(x.shape[2:], kshape))
    if any(n <= 0 for n in out_sp):
        raise ShapeError(f"{op}: input {x.shape} too small for kernel {weight.shape}")
    b = x.shape[0]
    c_out = weight.shape[0]
    xt = np.ascontiguousarray(_pad(x.data, padding, nsp).swapaxes(0, 1))
    acc = _conv_forward(xt, weight.data, stride, out_sp)
    out = acc.reshape((c_out, b) + out_sp).swapaxes(0, 1)
    if bias is not None:
        out = out + bias.data.reshape((1, c_out) + (1,) * nsp)
    out = np.ascontiguousarray(out)
    wdata = weight.data
    in_shape = x.shape

    def bw(g):
        g2 = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(c_out, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gxt = _conv_adjoint(g2, wdata, stride, out_sp, xt.shape)
            gx = gxt.swapaxes(0, 1)
            if padding:
                gx = gx[(slice(None), slice(None)) + tuple(slice(padding, padding + n) for n in in_shape[2:])]
            gx = np.ascontiguousarray(gx)
        if weight.requires_grad:
            gw = _weight_grad(g2, xt, kshape, stride, out_sp)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=1)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record(op, out, inputs, bw)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if as_tensor(weight).ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d, got {as_tensor(weight).shape}")
    return conv_nd(x, weight, bias, stride, padding, op="conv2d")


def conv3d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    if as_tensor(weight).ndim != 5:
        raise ShapeError(f"conv3d: weight must be 5-d, got {as_tensor(weight).shape}")
    return conv_nd(x, weight, bias, stride, padding, op="conv3d")


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2-d convolution; output size ``(n-1)*stride - 2*padding + k``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 4 or x.ndim != 4:
        raise ShapeError(f"conv_transpose2d: need 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: input {x.shape} does not match weight {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"conv_transpose2d: bias {bias.shape} does not match weight {weight.shape}")
    check_finite("conv_transpose2d", (x.data, weight.data))
    stride, padding = int(stride), int(padding)
    b, c_in = x.shape[:2]
    c_out = weight.shape[1]
    kshape = weight.shape[2:]
    in_sp = x.shape[2:]
    full_sp = tuple((n - 1) * stride + k for n, k in zip(in_sp, kshape))
    out_sp = tuple(n - 2 * padding for n in full_sp)
    if any(n <= 0 for n in out_sp):
        raise ShapeError(f"conv_transpose2d: padding {padding} too large for {x.shape}")
    # forward of a transposed conv is the adjoint of a conv whose weight is W viewed as (C_in, C_out, k)
    wconv = weight.data  # (C_in, C_out, *k) acting as conv weight (C_out_conv=C_in, C_in_conv=C_out)
    x2 = np.ascontiguousarray(x.data.swapaxes(0, 1)).reshape(c_in, -1)
    full = _conv_adjoint(x2, wconv, stride, in_sp, (c_out, b) + full_sp)
    crop = tuple(slice(padding, padding + n) for n in out_sp)
    out = np.ascontiguousarray(full[(slice(None), slice(None)) + crop].swapaxes(0, 1))
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)
    xdata = x.data

    def bw(g):
        gfull = np.zeros((c_out, b) + full_sp, dtype=g.dtype)
        gfull[(slice(None), slice(None)) + crop] = g.swapaxes(0, 1)
        gx = gw = gb = None
        if x.requires_grad:
            acc = _conv_forward(gfull, wconv, stride, in_sp)
            gx = np.ascontiguousarray(acc.reshape((c_in, b) + in_sp).swapaxes(0, 1))
        if weight.requires_grad:
            xt = np.ascontiguousarray(xdata.swapaxes(0, 1)).reshape(c_in, -1)
            gw = _weight_grad(xt, gfull, kshape, stride, in_sp)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv_transpose2d", out, inputs, bw)
