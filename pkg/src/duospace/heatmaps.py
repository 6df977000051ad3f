"""Feature-norm heatmaps written as 8-bit binary PGM images."""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["norm_map", "to_uint8", "write_pgm", "read_pgm"]


def norm_map(features: np.ndarray) -> np.ndarray:
    """Per-location L2 norm over the leading channel axis of a (C, H, W) array."""
    return np.sqrt(np.sum(np.asarray(features, np.float64) ** 2, axis=0))


def to_uint8(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0:
        return np.zeros(v.shape, np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> Path:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-d image, got shape {img.shape}")
    if img.dtype != np.uint8:
        img = to_uint8(img)
    path = Path(path)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], np.uint8).reshape(h, w)
