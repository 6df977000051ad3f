"""Tiny convolutional backbone with a two-level top-down feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Conv2d, LayerNorm, Module, ModuleList, ShapeError, Tensor
from .autodiff import functional as F

__all__ = ["EncoderConfig", "FeaturePyramid", "ImageEncoder"]


@dataclass
class EncoderConfig:
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 64])
    out_channels: int = 64


@dataclass
class FeaturePyramid:
    """Per-camera multi-scale maps; ``levels[j]`` is (N, C, H_j, W_j)."""

    levels: list
    strides: list

    @property
    def num_cameras(self) -> int:
        return self.levels[0].shape[0]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid([lv.detach() for lv in self.levels], list(self.strides))


class _Stage(Module):
    def __init__(self, c_in, c_out, rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1)
        self.norm = LayerNorm(c_out, axis=1)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class ImageEncoder(Module):
    """Four stride-2 stages; the neck fuses stride-8 and stride-16 maps top-down."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, image_size=(128, 96)):
        super().__init__()
        self.config = config
        self.image_size = tuple(image_size)
        chans = [3] + list(config.stage_channels)
        if len(config.stage_channels) != 4:
            raise ValueError("encoder needs exactly 4 stages")
        for k in range(4):
            setattr(self, f"stage{k}", _Stage(chans[k], chans[k + 1], rng))
        c = config.out_channels
        self.lateral8 = Conv2d(chans[3], c, 1, rng)
        self.lateral16 = Conv2d(chans[4], c, 1, rng)

    strides = (8, 16)

    def forward(self, images) -> FeaturePyramid:
        """``images`` is (N, 3, H, W) in [0, 1]."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        w, h = self.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (h, w):
            raise ShapeError(f"encode: expected (N, 3, {h}, {w}) images, got {x.shape}")
        feats = []
        y = x
        for k in range(4):
            y = getattr(self, f"stage{k}")(y)
            feats.append(y)
        p16 = self.lateral16(feats[3])
        p8 = self.lateral8(feats[2])
        up = F.upsample_nearest2d(p16, 2)
        if up.shape[2:] != p8.shape[2:]:
            up = up[:, :, : p8.shape[2], : p8.shape[3]]
        p8 = p8 + up
        return FeaturePyramid([p8, p16], list(self.strides))
