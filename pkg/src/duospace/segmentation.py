"""BEV map segmentation: a small U-Net over the BEV features and two mask heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Conv2d, ConvTranspose2d, Module, Tensor
from .autodiff import functional as F
from .lifting import BevGrid
from .losses import bce_with_logits, dice_loss, sigmoid_focal

__all__ = ["SegConfig", "SegOutput", "SegHead", "seg_loss", "MAP_CLASSES"]

MAP_CLASSES = ("drivable", "lane")


@dataclass
class SegConfig:
    width: int = 32
    loss: str = field(default="focal-dice", metadata={"enum": ["focal-dice", "l1-ce-dice"]})
    focal_weight: float = 1.0
    dice_weight: float = 1.0


@dataclass
class SegOutput:
    logits: Tensor                  # (2, X, Y)


class SegHead(Module):
    """2-down / 2-up encoder-decoder with skips, then per-class 1x1 heads."""

    def __init__(self, channels: int, rng: np.random.Generator, width: int = 32):
        super().__init__()
        w = width
        self.enc0 = Conv2d(channels, w, 3, rng, padding=1)
        self.down1 = Conv2d(w, 2 * w, 3, rng, stride=2, padding=1)
        self.down2 = Conv2d(2 * w, 4 * w, 3, rng, stride=2, padding=1)
        self.up2 = ConvTranspose2d(4 * w, 2 * w, 2, rng, stride=2)
        self.fuse2 = Conv2d(4 * w, 2 * w, 3, rng, padding=1)
        self.up1 = ConvTranspose2d(2 * w, w, 2, rng, stride=2)
        self.fuse1 = Conv2d(2 * w, w, 3, rng, padding=1)
        self.head_drivable = Conv2d(w, 1, 1, rng)
        self.head_lane = Conv2d(w, 1, 1, rng)

    def forward(self, bev: BevGrid) -> SegOutput:
        x = bev.features
        c, nx, ny = x.shape
        if nx % 4 or ny % 4:
            raise ValueError(f"segment: BEV size {(nx, ny)} must be divisible by 4")
        x = F.reshape(x, (1, c, nx, ny))
        s0 = F.relu(self.enc0(x))
        s1 = F.relu(self.down1(s0))
        s2 = F.relu(self.down2(s1))
        u1 = F.relu(self.fuse2(F.concat([F.relu(self.up2(s2)), s1], axis=1)))
        u0 = F.relu(self.fuse1(F.concat([F.relu(self.up1(u1)), s0], axis=1)))
        logits = F.concat([self.head_drivable(u0), self.head_lane(u0)], axis=1)
        return SegOutput(F.reshape(logits, logits.shape[1:]))


def seg_loss(logits: Tensor, masks: np.ndarray, config: SegConfig | None = None):
    """Per-channel (focal + dice) averaged over channels; returns ``(loss, breakdown)``."""
    config = config or SegConfig()
    masks = np.asarray(masks)
    if masks.shape != logits.shape:
        raise ValueError(f"seg_loss: logits {logits.shape} vs masks {masks.shape}")
    if not np.all((masks == 0) | (masks == 1)):
        raise ValueError("seg_loss: mask values must be 0 or 1")
    spatial = tuple(range(1, logits.ndim))
    dice = F.mean(dice_loss(logits, masks, spatial))
    if config.loss == "focal-dice":
        focal = F.mean(sigmoid_focal(logits, masks))
        total = config.focal_weight * focal + config.dice_weight * dice
        return total, {"seg_focal": float(focal.item()), "seg_dice": float(dice.item())}
    if config.loss == "l1-ce-dice":
        l1 = F.mean(F.abs(F.sigmoid(logits) - Tensor(masks, dtype=logits.dtype)))
        ce = F.mean(bce_with_logits(logits, masks))
        total = l1 + ce + dice
        return total, {"seg_l1": float(l1.item()), "seg_ce": float(ce.item()), "seg_dice": float(dice.item())}
    raise ValueError(f"unknown segmentation loss {config.loss!r}")
