"""Bilinear sampling of feature maps at normalised image coordinates.

Coordinates are ``(u, v)`` in ``[0, 1]^2`` where ``u`` runs along the width
axis; texel ``(i, j)`` is centred at ``((j + 0.5) / W, (i + 0.5) / H)``.
Out-of-range coordinates clamp to the border texels.
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from .tensor import ShapeError, Tensor, as_tensor, check_finite, record

__all__ = ["grid_sample", "bilinear_weights"]


def bilinear_weights(pts: np.ndarray, height: int, width: int):
    """Corner indices, fractional weights and clamp masks for ``pts`` of shape (..., 2)."""
    px = pts[..., 0] * width - 0.5
    py = pts[..., 1] * height - 0.5
    inx = (px >= 0) & (px <= width - 1)
    iny = (py >= 0) & (py <= height - 1)
    px = np.clip(px, 0, width - 1)
    py = np.clip(py, 0, height - 1)
    x0 = np.minimum(np.floor(px).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = px - x0
    wy = py - y0
    return x0, x1, y0, y1, wx, wy, inx, iny


def grid_sample(features, points) -> Tensor:
    """Sample ``features`` (B, C, H, W) at ``points`` (B, P, 2); returns (B, P, C)."""
    features, points = as_tensor(features), as_tensor(points)
    if features.ndim != 4:
        raise ShapeError(f"grid_sample: features must be (B, C, H, W), got {features.shape}")
    if points.ndim != 3 or points.shape[-1] != 2 or points.shape[0] != features.shape[0]:
        raise ShapeError(
            f"grid_sample: points {points.shape} incompatible with features {features.shape}")
    check_finite("grid_sample", (features.data, points.data))
    b, c, h, w = features.shape
    p = points.shape[1]
    dtype = features.dtype
    pts = points.data.astype(dtype)
    bad = ~np.all(np.isfinite(pts), axis=-1)
    if bad.any():
        pts = np.where(bad[..., None], 0.0, pts)
    x0, x1, y0, y1, wx, wy, inx, iny = bilinear_weights(pts, h, w)
    base = (np.arange(b) * (h * w))[:, None]
    idx = [base + y0 * w + x0, base + y0 * w + x1, base + y1 * w + x0, base + y1 * w + x1]
    wts = [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy]
    rows = np.broadcast_to(np.arange(b * p).reshape(b, p), (4, b, p)).reshape(-1)
    cols = np.stack(idx).reshape(-1)
    vals = np.stack(wts).reshape(-1).astype(dtype)
    smat = sparse.csr_matrix((vals, (rows, cols)), shape=(b * p, b * h * w))
    flat = np.ascontiguousarray(features.data.transpose(0, 2, 3, 1)).reshape(b * h * w, c)
    out = np.asarray(smat @ flat).reshape(b, p, c)
    if bad.any():
        out[bad] = np.nan   # non-finite coordinates give non-finite samples

    def bw(g):
        g2 = g.reshape(b * p, c)
        gf = gp = None
        if features.requires_grad:
            gflat = np.asarray(smat.T @ g2).reshape(b, h, w, c)
            gf = np.ascontiguousarray(gflat.transpose(0, 3, 1, 2))
        if points.requires_grad:
            v00, v01, v10, v11 = (flat[i.reshape(-1)].reshape(b, p, c) for i in idx)
            dfdx = ((1 - wy)[..., None] * (v01 - v00) + wy[..., None] * (v11 - v10))
            dfdy = ((1 - wx)[..., None] * (v10 - v00) + wx[..., None] * (v11 - v01))
            gp = np.empty((b, p, 2), dtype=points.dtype)
            gp[..., 0] = (g * dfdx).sum(-1) * w * inx
            gp[..., 1] = (g * dfdy).sum(-1) * h * iny
        return gf, gp

    return record("grid_sample", out, (features, points), bw)
