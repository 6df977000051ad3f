"""Centre-distance detection metrics, true-positive errors, composite score and mask IoU."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["FrameDetections", "DIST_THRESHOLDS", "TP_THRESHOLD", "match_frame", "average_precision",
           "compute_map", "compute_tp_errors", "compute_nds", "compute_iou", "evaluate", "yaw_of",
           "aligned_iou"]

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
RECALL_SAMPLES = 101


@dataclass
class FrameDetections:
    pred_poses: np.ndarray                      # (P, 10)
    pred_classes: np.ndarray                    # (P,)
    pred_scores: np.ndarray                     # (P,) in [0, 1]
    gt_poses: np.ndarray                        # (G, 10)
    gt_classes: np.ndarray                      # (G,)

    def __post_init__(self):
        self.pred_poses = np.asarray(self.pred_poses, float).reshape(-1, 10)
        self.pred_classes = np.asarray(self.pred_classes, int).reshape(-1)
        self.pred_scores = np.asarray(self.pred_scores, float).reshape(-1)
        self.gt_poses = np.asarray(self.gt_poses, float).reshape(-1, 10)
        self.gt_classes = np.asarray(self.gt_classes, int).reshape(-1)
        if np.any((self.pred_scores < 0) | (self.pred_scores > 1)):
            raise ValueError("detection scores must lie in [0, 1]")
        if not np.all(np.isfinite(self.pred_poses)):
            raise ValueError("predicted poses must be finite")


def yaw_of(poses: np.ndarray) -> np.ndarray:
    return np.arctan2(poses[:, 6], poses[:, 7])


def aligned_iou(size_a: np.ndarray, size_b: np.ndarray) -> np.ndarray:
    """IoU of boxes sharing centre and heading, from their (w, l, h)."""
    inter = np.prod(np.minimum(size_a, size_b), axis=-1)
    union = np.prod(size_a, axis=-1) + np.prod(size_b, axis=-1) - inter
    return inter / union


def _wrap(a: np.ndarray) -> np.ndarray:
    return np.abs((a + np.pi) % (2 * np.pi) - np.pi)


@dataclass
class _ClassMatches:
    scores: list = field(default_factory=list)
    is_tp: list = field(default_factory=list)
    pairs: list = field(default_factory=list)   # (pred pose, gt pose) for TPs
    num_gt: int = 0


def match_frame(pred_xy, pred_scores, gt_xy, threshold: float):
    """Greedy score-ordered matching to the nearest unmatched gt within ``threshold``.

    Returns ``(order, matched_gt)`` where ``matched_gt[i]`` is the gt index for
    the ``i``-th prediction in score order, or -1.
    """
    order = np.argsort(-np.asarray(pred_scores), kind="stable")
    taken = np.zeros(len(gt_xy), dtype=bool)
    out = np.full(len(order), -1)
    for rank, i in enumerate(order):
        if len(gt_xy) == 0:
            break
        d = np.hypot(*(gt_xy - pred_xy[i]).T)
        d[taken] = np.inf
        j = int(np.argmin(d))
        if d[j] < threshold:
            taken[j] = True
            out[rank] = j
    return order, out


def _accumulate(frames, cls: int, threshold: float) -> _ClassMatches:
    acc = _ClassMatches()
    for fr in frames:
        pm = fr.pred_classes == cls
        gm = fr.gt_classes == cls
        gt = fr.gt_poses[gm]
        acc.num_gt += len(gt)
        preds = fr.pred_poses[pm]
        scores = fr.pred_scores[pm]
        order, matched = match_frame(preds[:, :2], scores, gt[:, :2], threshold)
        for i, j in zip(order, matched):
            acc.scores.append(scores[i])
            acc.is_tp.append(j >= 0)
            if j >= 0:
                acc.pairs.append((preds[i], gt[j]))
    return acc


def average_precision(scores, is_tp, num_gt: int) -> float:
    """Area under the precision envelope above recall 0.1, less precision 0.1, rescaled to [0, 1]."""
    if num_gt == 0 or len(scores) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(is_tp, float)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, RECALL_SAMPLES)
    idx = np.searchsorted(recall, grid - 1e-12, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    sampled = sampled[grid > MIN_RECALL + 1e-12]
    # rescale each sample so a perfect envelope averages to exactly 1
    return float(np.mean(np.clip((sampled - MIN_PRECISION) / (1.0 - MIN_PRECISION), 0.0, None)))


def compute_map(frames, num_classes: int, thresholds=DIST_THRESHOLDS) -> dict:
    if len(frames) == 0:
        raise ValueError("compute_map needs at least one frame")
    per_class = {}
    for c in range(num_classes):
        per_class[c] = {t: average_precision(*_ap_inputs(_accumulate(frames, c, t))) for t in thresholds}
    present = [c for c in range(num_classes) if any(np.sum(f.gt_classes == c) for f in frames)]
    classes = present if present else list(range(num_classes))
    m = float(np.mean([per_class[c][t] for c in classes for t in thresholds]))
    return {"mAP": m, "per_class": per_class, "classes_evaluated": classes}


def _ap_inputs(acc: _ClassMatches):
    return acc.scores, acc.is_tp, acc.num_gt


def compute_tp_errors(frames, num_classes: int, threshold: float = TP_THRESHOLD) -> dict:
    per_class = {}
    present = [c for c in range(num_classes) if any(np.sum(f.gt_classes == c) for f in frames)]
    for c in present or range(num_classes):
        acc = _accumulate(frames, c, threshold)
        if not acc.pairs:
            per_class[c] = {"ATE": 1.0, "ASE": 1.0, "AOE": 1.0, "AVE": 1.0}
            continue
        p = np.array([a for a, _ in acc.pairs])
        g = np.array([b for _, b in acc.pairs])
        per_class[c] = {
            "ATE": float(np.mean(np.hypot(*(p[:, :2] - g[:, :2]).T))),
            "ASE": float(np.mean(1.0 - aligned_iou(p[:, 3:6], g[:, 3:6]))),
            "AOE": float(np.mean(_wrap(yaw_of(p) - yaw_of(g)))),
            "AVE": float(np.mean(np.hypot(*(p[:, 8:10] - g[:, 8:10]).T))),
        }
    means = {f"m{k}": float(np.mean([v[k] for v in per_class.values()])) for k in ("ATE", "ASE", "AOE", "AVE")}
    return {**means, "per_class": per_class}


def compute_nds(m_ap: float, tp_errors) -> float:
    errs = [tp_errors[k] for k in ("mATE", "mASE", "mAOE", "mAVE")] if isinstance(tp_errors, dict) else list(tp_errors)
    bounded = sum(max(0.0, 1.0 - min(1.0, e)) for e in errs)
    return float((5.0 * m_ap + bounded) / 9.0)


def compute_iou(logits: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Per-channel IoU of ``sigmoid(logits) > 0.5`` against binary masks; empty-vs-empty counts as 1."""
    logits, masks = np.asarray(logits), np.asarray(masks)
    if logits.shape != masks.shape:
        raise ValueError(f"compute_iou: logits {logits.shape} vs masks {masks.shape}")
    pred = logits > 0.0
    gt = masks > 0.5
    axes = tuple(range(1, logits.ndim))
    inter = np.sum(pred & gt, axis=axes)
    union = np.sum(pred | gt, axis=axes)
    return np.where(union > 0, inter / np.maximum(union, 1), 1.0)


def evaluate(frames, num_classes: int, class_names=None) -> dict:
    """Full detection report: mAP, per-class AP, TP errors and composite score."""
    names = list(class_names) if class_names else [str(c) for c in range(num_classes)]
    ap = compute_map(frames, num_classes)
    tp = compute_tp_errors(frames, num_classes)
    report = {
        "mAP": ap["mAP"],
        "NDS": compute_nds(ap["mAP"], tp),
        **{k: tp[k] for k in ("mATE", "mASE", "mAOE", "mAVE")},
        "per_class": {
            names[c]: {"AP": {str(t): v for t, v in ap["per_class"][c].items()}, **tp["per_class"].get(c, {})}
            for c in range(num_classes)
        },
        "num_frames": len(frames),
    }
    return report
