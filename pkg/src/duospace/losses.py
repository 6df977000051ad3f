"""Shared differentiable losses."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .autodiff import functional as F

__all__ = ["sigmoid_focal", "dice_loss", "bce_with_logits"]


def sigmoid_focal(logits: Tensor, targets: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Elementwise sigmoid focal loss (unreduced)."""
    t = Tensor(np.asarray(targets), dtype=logits.dtype)
    p = F.sigmoid(logits)
    ce = -(t * F.log_sigmoid(logits) + (1.0 - t) * F.log_sigmoid(-logits))
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = t * alpha + (1.0 - t) * (1.0 - alpha)
    modulator = F.square(1.0 - p_t) if gamma == 2.0 else F.power(1.0 - p_t, gamma)
    return alpha_t * modulator * ce


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    t = Tensor(np.asarray(targets), dtype=logits.dtype)
    return -(t * F.log_sigmoid(logits) + (1.0 - t) * F.log_sigmoid(-logits))


def dice_loss(logits: Tensor, targets: np.ndarray, axes, smooth: float = 1.0) -> Tensor:
    """``1 - (2|P.T| + s) / (|P| + |T| + s)`` reduced over ``axes``."""
    t = Tensor(np.asarray(targets), dtype=logits.dtype)
    p = F.sigmoid(logits)
    inter = F.sum(p * t, axis=axes)
    denom = F.sum(p, axis=axes) + F.sum(t, axis=axes)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)
