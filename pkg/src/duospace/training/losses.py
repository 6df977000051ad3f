"""Set-prediction cost and deep-supervised detection loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..autodiff import Tensor
from ..autodiff import functional as F
from ..decoder import full_extent, pose_inputs
from ..losses import sigmoid_focal
from .matching import MatchResult, match

__all__ = ["LossConfig", "normalize_poses", "detection_cost", "detection_loss"]

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossConfig:
    cost_cls: float = 2.0
    cost_reg: float = 0.25
    loss_cls: float = 2.0
    loss_reg: float = 0.25
    # per-component L1 weights over (x, y, z, log w, log l, log h, sin, cos, vx, vy)
    reg_weights: list = field(default_factory=lambda: [1.0] * 10)


def normalize_poses(poses, extent):
    """Differentiable version of the pose-encoder standardisation; numpy in, numpy out."""
    if not isinstance(poses, Tensor):
        return pose_inputs(poses, extent)
    e = full_extent(extent)
    centre = ((e[1::2] + e[0::2]) / 2.0).astype(poses.dtype)
    half = ((e[1::2] - e[0::2]) / 2.0).astype(poses.dtype)
    xyz = (poses[:, 0:3] - Tensor(centre, dtype=poses.dtype)) / Tensor(half, dtype=poses.dtype)
    size = F.log(F.maximum(poses[:, 3:6], 0.1))
    return F.concat([xyz, size, poses[:, 6:8], poses[:, 8:10] * 0.1], axis=1)


def _focal_cost(logits: np.ndarray, gt_classes: np.ndarray) -> np.ndarray:
    p = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    eps = 1e-12
    pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * -np.log(p + eps)
    neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * -np.log(1 - p + eps)
    return (pos - neg)[:, gt_classes]


def detection_cost(pred_logits, pred_poses, gt_poses, gt_classes, extent, config: LossConfig | None = None):
    """(k, G) matching cost: weighted focal-style class cost plus weighted L1 on normalised poses."""
    config = config or LossConfig()
    logits = pred_logits.data if isinstance(pred_logits, Tensor) else np.asarray(pred_logits)
    poses = pred_poses.data if isinstance(pred_poses, Tensor) else np.asarray(pred_poses)
    gt_poses = np.asarray(gt_poses, float).reshape(-1, 10)
    gt_classes = np.asarray(gt_classes, int).reshape(-1)
    w = np.asarray(config.reg_weights, float)
    pn = pose_inputs(poses, extent)
    gn = pose_inputs(gt_poses, extent)
    l1 = np.sum(np.abs(pn[:, None, :] - gn[None, :, :]) * w, axis=-1)
    cost = config.cost_reg * l1
    if config.cost_cls:
        cost = cost + config.cost_cls * _focal_cost(logits, gt_classes)
    return cost


def detection_loss(layers: Sequence, gt_poses, gt_classes, num_classes: int, extent,
                   config: LossConfig | None = None):
    """Sum over decoder layers of focal classification plus matched L1; returns ``(loss, breakdown)``.

    ``layers`` holds objects with ``logits`` (k, C) and ``poses`` (k, 10) tensors.
    Matching is recomputed per layer and treated as a constant.
    """
    if not layers:
        raise ValueError("detection_loss needs at least one layer of predictions")
    config = config or LossConfig()
    gt_poses = np.asarray(gt_poses, float).reshape(-1, 10)
    gt_classes = np.asarray(gt_classes, int).reshape(-1)
    w = np.asarray(config.reg_weights, dtype=layers[0].poses.dtype)
    norm = max(1.0, float(len(gt_classes)))
    total = None
    breakdown = {"cls": 0.0, "reg": 0.0, "layers": [], "matches": []}
    for layer in layers:
        k = layer.logits.shape[0]
        m = (match(detection_cost(layer.logits, layer.poses, gt_poses, gt_classes, extent, config))
             if len(gt_classes) else MatchResult((), tuple(range(k))))
        target = np.zeros((k, num_classes))
        q, g = m.query_indices, m.gt_indices
        if len(q):
            target[q, gt_classes[g]] = 1.0
        cls = F.sum(sigmoid_focal(layer.logits, target, FOCAL_GAMMA, FOCAL_ALPHA)) * (1.0 / norm)
        term = cls * config.loss_cls
        reg_val = 0.0
        if len(q):
            pred = normalize_poses(layer.poses[q], extent)
            raw = getattr(layer, "raw_yaw", None)
            if raw is not None:
                # a flipped heading has a vanishing gradient through the renormalisation
                pred = F.concat([pred[:, 0:6], raw[q], pred[:, 8:10]], axis=1)
            tgt = Tensor(pose_inputs(gt_poses[g], extent), dtype=pred.dtype)
            reg = F.sum(F.abs(pred - tgt) * Tensor(w, dtype=pred.dtype)) * (1.0 / norm)
            term = term + reg * config.loss_reg
            reg_val = float(reg.item())
        total = term if total is None else total + term
        breakdown["cls"] += float(cls.item())
        breakdown["reg"] += reg_val
        breakdown["layers"].append(float(term.item()))
        breakdown["matches"].append(m)
    return total, breakdown
