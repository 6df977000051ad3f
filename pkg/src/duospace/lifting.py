"""Parameter-free voxel lifting and the voxel-to-BEV divergence enhancement stack."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Conv2d, Conv3d, Module, Tensor, grid_sample
from .autodiff import functional as F
from .encoder import FeaturePyramid
from .geometry import CameraRig, project_points

__all__ = ["GridConfig", "VoxelGrid", "BevGrid", "voxel_centers", "lift", "FeatureDivergence",
           "enhance_and_reduce", "bev_cell_centers"]


@dataclass
class GridConfig:
    extent: tuple = (-24.0, 24.0, -24.0, 24.0, -1.0, 5.0)
    resolution: tuple = (48, 48, 8)

    @property
    def cell_size(self) -> np.ndarray:
        e = np.asarray(self.extent, float)
        return (e[1::2] - e[0::2]) / np.asarray(self.resolution, float)

    @property
    def bev_extent(self) -> tuple:
        return tuple(self.extent[:4])


@dataclass
class VoxelGrid:
    extent: tuple
    resolution: tuple
    features: Tensor       # (C, X, Y, Z)
    hit_count: np.ndarray  # (X, Y, Z) int


@dataclass
class BevGrid:
    extent: tuple          # (x_min, x_max, y_min, y_max)
    resolution: tuple      # (X, Y)
    features: Tensor       # (C, X, Y)

    def detach(self) -> "BevGrid":
        return BevGrid(self.extent, self.resolution, self.features.detach())


def voxel_centers(grid: GridConfig) -> np.ndarray:
    """Cell centres (X, Y, Z, 3) in ego metres."""
    e = np.asarray(grid.extent, float)
    axes = [e[2 * i] + (np.arange(n) + 0.5) * (e[2 * i + 1] - e[2 * i]) / n
            for i, n in enumerate(grid.resolution)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def bev_cell_centers(extent, resolution) -> np.ndarray:
    x0, x1, y0, y1 = extent
    nx, ny = resolution
    cx = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    cy = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    return np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1)


def _projection_table(rig: CameraRig, grid: GridConfig):
    pts = voxel_centers(grid).reshape(-1, 3)
    u, v, _, valid = project_points(rig, pts)
    w, h = rig.image_size
    norm = np.stack([u / w, v / h], axis=-1)
    norm = np.where(valid[..., None], norm, 0.5)
    return norm, valid


def lift(pyramid: FeaturePyramid, rig: CameraRig, grid: GridConfig) -> VoxelGrid:
    """Average the finest-level feature bilinearly sampled in every camera that sees a voxel."""
    feats = pyramid.levels[0]
    n, c = feats.shape[:2]
    if n != len(rig):
        raise ValueError(f"lift: pyramid has {n} cameras but rig has {len(rig)}")
    norm, valid = _projection_table(rig, grid)
    count = valid.sum(axis=0)
    sampled = grid_sample(feats, Tensor(norm, dtype=feats.dtype))          # (N, P, C)
    weights = (valid / np.maximum(count, 1)[None]).astype(feats.dtype)     # (N, P)
    mean = F.sum(sampled * Tensor(weights[..., None], dtype=feats.dtype), axis=0)  # (P, C)
    X, Y, Z = grid.resolution
    vox = F.reshape(F.transpose(mean, (1, 0)), (c, X, Y, Z))
    return VoxelGrid(tuple(grid.extent), tuple(grid.resolution), vox, count.reshape(X, Y, Z))


class FeatureDivergence(Module):
    """Three channel-preserving Conv3Ds (residual), Z folded into channels, three Conv2Ds.

    With ``bypass=True`` the stack is replaced by the fold plus a single 1x1 linear mix.
    """

    def __init__(self, channels: int, depth: int, rng: np.random.Generator, bypass: bool = False):
        super().__init__()
        self.bypass = bypass
        c = channels
        if bypass:
            self.mix = Conv2d(c * depth, c, 1, rng)
            return
        self.conv3d_0 = Conv3d(c, c, 3, rng, padding=1)
        self.conv3d_1 = Conv3d(c, c, 3, rng, padding=1)
        # zero-initialised so the residual block starts as the identity
        self.conv3d_2 = Conv3d(c, c, 3, rng, padding=1, zero=True)
        self.conv2d_0 = Conv2d(c * depth, c, 3, rng, padding=1)
        self.conv2d_1 = Conv2d(c, c, 3, rng, padding=1)
        self.conv2d_2 = Conv2d(c, c, 3, rng, padding=1)

    def forward(self, voxels: Tensor) -> Tensor:
        """(C, X, Y, Z) -> (C, X, Y)."""
        c, nx, ny, nz = voxels.shape
        v = F.reshape(voxels, (1, c, nx, ny, nz))
        if not self.bypass:
            r = F.relu(self.conv3d_0(v))
            r = F.relu(self.conv3d_1(r))
            v = v + self.conv3d_2(r)
        flat = F.reshape(F.transpose(v, (0, 1, 4, 2, 3)), (1, c * nz, nx, ny))
        if self.bypass:
            out = self.mix(flat)
        else:
            out = F.relu(self.conv2d_0(flat))
            out = F.relu(self.conv2d_1(out))
            out = self.conv2d_2(out)
        return F.reshape(out, out.shape[1:])


def enhance_and_reduce(voxels: VoxelGrid, module: FeatureDivergence) -> BevGrid:
    bev = module(voxels.features)
    return BevGrid(tuple(voxels.extent[:4]), tuple(voxels.resolution[:2]), bev)
