"""Training loop with per-epoch evaluation, resumable checkpoints and JSON-lines logs."""
from __future__ import annotations

import json
import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..autodiff import backward, clear_tape, load_arrays, no_grad, save_arrays
from ..autodiff import functional as F
from ..metrics import FrameDetections, compute_iou, evaluate
from ..segmentation import seg_loss
from .losses import detection_loss
from .optim import AdamW, ParamGroup, clip_grad_norm, cosine_lr

__all__ = ["NumericFailure", "TrainResult", "Trainer", "decode", "evaluate_model", "sample_loss",
           "save_checkpoint", "load_checkpoint", "CHECKPOINT_KIND"]

CHECKPOINT_KIND = "duospace-model"


class NumericFailure(FloatingPointError):
    """The loss or gradient became non-finite."""


@dataclass
class TrainResult:
    steps: int
    losses: list
    last_checkpoint: Optional[Path]
    evals: list


def decode(pred, score_floor: float = 0.0):
    """Final-layer prediction -> (poses, classes, scores) as numpy."""
    logits = pred.logits.data.astype(np.float64)
    probs = 1.0 / (1.0 + np.exp(-logits))
    cls = probs.argmax(axis=1)
    score = probs.max(axis=1)
    keep = score >= score_floor
    return pred.poses.data.astype(np.float64)[keep], cls[keep], score[keep]


def sample_loss(model, frames, num_classes: int, extent, train_cfg):
    """Total loss and logged breakdown for one sample (the last of ``frames`` is supervised)."""
    out = model(frames)
    target = frames[-1]
    heads = [t for lay in out.layers for t in (lay.logits, lay.poses)]
    if out.seg is not None:
        heads.append(out.seg.logits)
    if not all(np.all(np.isfinite(t.data)) for t in heads):
        clear_tape()
        raise NumericFailure("model produced non-finite predictions")
    total, parts = None, {}
    if out.layers:
        det, info = detection_loss(out.layers, target.gt_poses, target.gt_classes, num_classes, extent,
                                   train_cfg.loss)
        total = det
        parts.update(det=float(det.item()), cls=info["cls"], reg=info["reg"])
    if out.seg is not None:
        seg, info = seg_loss(out.seg.logits, target.map_masks, model.seg_cfg)
        weight = train_cfg.seg_weight if out.layers else 1.0
        total = seg * weight if total is None else total + seg * weight
        parts.update(seg=float(seg.item()), **info)
    parts["total"] = float(total.item())
    return total, parts, out


def evaluate_model(model, scenes: Sequence, num_classes: int, class_names=None) -> dict:
    """Metrics over every frame of ``scenes`` using the final decoder layer."""
    dets, ious = [], []
    with no_grad():
        for sc in scenes:
            for fi in range(len(sc.frames)):
                out = model(sc.frames[: fi + 1])
                fr = sc.frames[fi]
                if out.layers:
                    poses, cls, score = decode(out.layers[-1])
                    dets.append(FrameDetections(poses, cls, score, fr.gt_poses, fr.gt_classes))
                if out.seg is not None:
                    ious.append(compute_iou(out.seg.logits.data, fr.map_masks))
                clear_tape()
    report = {}
    if dets:
        report.update(evaluate(dets, num_classes, class_names))
    if ious:
        per = np.mean(np.stack(ious), axis=0)
        report["IoU"] = {"drivable": float(per[0]), "lane": float(per[1]), "mean": float(per.mean())}
    return report


# -- checkpoints --------------------------------------------------------------------------
def save_checkpoint(directory, model, optimizer: Optional[AdamW] = None, meta: Optional[dict] = None) -> Path:
    arrays = {f"model/{n}": p.data for n, p in model.named_parameters()}
    metadata = {"kind": CHECKPOINT_KIND, **(meta or {})}
    if optimizer is not None:
        arrays.update({f"optim/{k}": v for k, v in optimizer.state_arrays().items()})
        metadata["optimizer_step"] = optimizer.step_count
    return save_arrays(directory, arrays, metadata)


def load_checkpoint(directory, model, optimizer: Optional[AdamW] = None) -> dict:
    arrays, meta = load_arrays(directory)
    if meta.get("kind") != CHECKPOINT_KIND:
        from ..autodiff import CheckpointError
        raise CheckpointError(f"{directory}: not a model checkpoint")
    model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    if optimizer is not None:
        optimizer.load_state_arrays({k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")},
                                    meta.get("optimizer_step", 0))
    return meta


def _write_jsonl(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


class Trainer:
    """Drives optimisation of a model over ``(scene, frame)`` samples.

    The sample order of epoch ``e`` is a permutation drawn from ``seed`` and
    ``e`` only, so a run resumed from any checkpoint replays the same order.
    """

    def __init__(self, model, train_cfg, train_scenes: Sequence, val_scenes: Sequence = (),
                 out_dir=None, seed: int = 0, num_classes: int = 3, class_names=None, extent=None,
                 run_meta: Optional[dict] = None):
        self.model = model
        self.cfg = train_cfg
        self.train_scenes = list(train_scenes)
        self.val_scenes = list(val_scenes)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.seed = seed
        self.num_classes = num_classes
        self.class_names = class_names
        self.extent = tuple(extent) if extent is not None else tuple(model.grid.extent)
        self.run_meta = run_meta or {}
        self.samples = [(si, fi) for si, sc in enumerate(self.train_scenes) for fi in range(len(sc.frames))]
        if not self.samples:
            raise ValueError("training set is empty")
        backbone = [(n, p) for n, p in model.named_parameters() if n.startswith("encoder.")]
        other = [(n, p) for n, p in model.named_parameters() if not n.startswith("encoder.")]
        self.optimizer = AdamW([ParamGroup(backbone, train_cfg.lr_backbone, "backbone"),
                                ParamGroup(other, train_cfg.lr_other, "other")],
                               betas=tuple(train_cfg.betas), weight_decay=train_cfg.weight_decay)
        self.steps_per_epoch = math.ceil(len(self.samples) / train_cfg.batch_size)
        full = self.steps_per_epoch * train_cfg.epochs
        self.total_steps = min(full, train_cfg.max_steps) if train_cfg.max_steps else full
        self.step = 0

    # -- bookkeeping ----------------------------------------------------------------------
    def _order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.samples))

    def batch_for(self, step: int) -> list:
        epoch, within = divmod(step, self.steps_per_epoch)
        order = self._order(epoch)
        b = self.cfg.batch_size
        return [self.samples[i] for i in order[within * b:(within + 1) * b]]

    @property
    def ckpt_root(self) -> Optional[Path]:
        return self.out_dir / "checkpoints" if self.out_dir else None

    def save(self) -> Optional[Path]:
        if self.ckpt_root is None:
            return None
        path = self.ckpt_root / f"step_{self.step:06d}"
        save_checkpoint(path, self.model, self.optimizer, {"step": self.step, **self.run_meta})
        (self.ckpt_root / "latest").write_text(path.name + "\n")
        kept = sorted(p for p in self.ckpt_root.iterdir() if p.is_dir() and p.name.startswith("step_"))
        for old in kept[: -self.cfg.keep_checkpoints]:
            shutil.rmtree(old)
        return path

    def latest_checkpoint(self) -> Optional[Path]:
        if self.ckpt_root is None or not (self.ckpt_root / "latest").is_file():
            return None
        return self.ckpt_root / (self.ckpt_root / "latest").read_text().strip()

    def resume(self, path=None) -> int:
        path = Path(path) if path is not None else self.latest_checkpoint()
        if path is None:
            return 0
        meta = load_checkpoint(path, self.model, self.optimizer)
        self.step = int(meta["step"])
        return self.step

    # -- optimisation ---------------------------------------------------------------------
    def train_step(self) -> dict:
        batch = self.batch_for(self.step)
        self.model.zero_grad()
        record = {}
        for si, fi in batch:
            frames = self.train_scenes[si].frames[: fi + 1]
            loss, parts, _ = sample_loss(self.model, frames, self.num_classes, self.extent, self.cfg)
            if not math.isfinite(parts["total"]):
                clear_tape()
                raise NumericFailure(f"non-finite loss at step {self.step} (scene {si}, frame {fi})")
            backward(loss * (1.0 / len(batch)))
            for k, v in parts.items():
                record[k] = record.get(k, 0.0) + v / len(batch)
        params = self.model.parameters()
        gnorm = clip_grad_norm(params, self.cfg.clip_norm)
        if not math.isfinite(gnorm):
            raise NumericFailure(f"non-finite gradient norm at step {self.step}")
        scale = cosine_lr(self.step, self.total_steps, self.cfg.lr_floor)
        self.optimizer.step(scale)
        self.step += 1
        record.update(step=self.step, grad_norm=gnorm, lr_scale=scale)
        return record

    def run(self, resume: bool = False, log_every: int = 1, progress=None) -> TrainResult:
        if resume:
            self.resume()
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        train_log = self.out_dir / "train_log.jsonl" if self.out_dir else None
        metrics_log = self.out_dir / "metrics.jsonl" if self.out_dir else None
        losses, evals = [], []
        last = self.latest_checkpoint()
        while self.step < self.total_steps:
            record = self.train_step()
            losses.append(record["total"])
            if train_log is not None and (self.step % log_every == 0):
                _write_jsonl(train_log, record)
            if progress is not None:
                progress(record)
            end_of_epoch = self.step % self.steps_per_epoch == 0 or self.step == self.total_steps
            if end_of_epoch:
                epoch = math.ceil(self.step / self.steps_per_epoch)
                if self.cfg.eval_every and (epoch % self.cfg.eval_every == 0 or self.step == self.total_steps):
                    split = self.val_scenes if self.val_scenes else []
                    rep = {"step": self.step, "epoch": epoch}
                    if split:
                        rep["val"] = evaluate_model(self.model, split, self.num_classes, self.class_names)
                    rep["train_loss"] = record["total"]
                    evals.append(rep)
                    if metrics_log is not None:
                        _write_jsonl(metrics_log, rep)
                last = self.save() or last
        return TrainResult(self.step, losses, last, evals)
