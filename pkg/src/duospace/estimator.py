"""Scikit-learn style facade: ``fit`` on synthetic scenes, ``predict`` detections, ``score`` by mAP."""
from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import clear_tape, no_grad
from .config import RunConfig, config_from_dict, config_to_dict
from .scene import Scene, read_scenes

__all__ = ["DuoSpaceNet", "check_scenes", "check_config"]


def check_scenes(X, name: str = "X") -> list:
    """A dataset directory, one ``Scene`` or a sequence of them -> validated list of scenes."""
    if isinstance(X, (str, Path)):
        X = read_scenes(X)
    elif isinstance(X, Scene):
        X = [X]
    scenes = list(X)
    if not scenes:
        raise ValueError(f"{name} holds no scenes")
    for i, sc in enumerate(scenes):
        if not isinstance(sc, Scene):
            raise TypeError(f"{name}[{i}] is {type(sc).__name__}, expected Scene")
        if not sc.frames:
            raise ValueError(f"{name}[{i}] has no frames")
    ref = scenes[0].frames[0]
    for i, sc in enumerate(scenes):
        for fr in sc.frames:
            if fr.images.shape != ref.images.shape or fr.map_masks.shape != ref.map_masks.shape:
                raise ValueError(f"{name}[{i}]: frame shapes {fr.images.shape}/{fr.map_masks.shape} differ "
                                 f"from {ref.images.shape}/{ref.map_masks.shape}")
            if not np.all(np.isfinite(fr.images)):
                raise ValueError(f"{name}[{i}]: images contain non-finite values")
    return scenes


def check_config(config) -> RunConfig:
    if config is None:
        return RunConfig()
    if isinstance(config, RunConfig):
        return copy.deepcopy(config)
    return config_from_dict(dict(config))


class DuoSpaceNet(BaseEstimator):
    """Train and query a duo-space detector.

    ``config`` is a run-configuration dict (or ``RunConfig``); the remaining
    keyword arguments override the matching config fields when not ``None``.
    """

    def __init__(self, config=None, seed=None, max_steps=None, seg_mode=None, ablate=None, temporal=None,
                 out_dir=None):
        self.config = config
        self.seed = seed
        self.max_steps = max_steps
        self.seg_mode = seg_mode
        self.ablate = ablate
        self.temporal = temporal
        self.out_dir = out_dir

    def _resolved_config(self) -> RunConfig:
        cfg = check_config(self.config)
        if self.seed is not None:
            cfg.seed = int(self.seed)
        if self.max_steps is not None:
            cfg.training.max_steps = int(self.max_steps)
        if self.seg_mode is not None:
            cfg.model.seg_mode = self.seg_mode
        if self.ablate is not None:
            cfg.model.ablate = self.ablate
        if self.temporal is not None:
            cfg.temporal.enabled = bool(self.temporal)
        return config_from_dict(config_to_dict(cfg))

    def fit(self, X, y=None):
        """Train on scenes ``X``; ``y`` is unused because scenes carry their own labels."""
        from .pipeline import build_model, class_names
        from .training import Trainer
        scenes = check_scenes(X)
        cfg = self._resolved_config()
        if tuple(scenes[0].frames[0].map_masks.shape[1:]) != tuple(cfg.grid.resolution[:2]):
            raise ValueError(f"mask resolution {scenes[0].frames[0].map_masks.shape[1:]} does not match "
                             f"grid resolution {tuple(cfg.grid.resolution[:2])}")
        model = build_model(cfg, rig=scenes[0].rig)
        trainer = Trainer(model, cfg.training, scenes, out_dir=self.out_dir, seed=cfg.seed,
                          num_classes=cfg.decoder.num_classes, class_names=class_names())
        result = trainer.run()
        self.model_ = model
        self.config_ = cfg
        self.loss_curve_ = list(result.losses)
        self.n_steps_ = result.steps
        return self

    def _forward_all(self, X):
        check_is_fitted(self)
        scenes = check_scenes(X)
        with no_grad():
            for sc in scenes:
                for fi in range(len(sc.frames)):
                    yield sc, fi, self.model_(sc.frames[: fi + 1])
                    clear_tape()

    def predict(self, X, score_floor: float = 0.0) -> list:
        """Per frame, a dict of ``poses`` (P, 10), ``classes`` (P,) and ``scores`` (P,)."""
        from .training import decode
        out = []
        for _, _, pred in self._forward_all(X):
            if not pred.layers:
                raise ValueError("model was trained with seg_mode='only' and has no detection head")
            poses, cls, score = decode(pred.layers[-1], score_floor)
            out.append({"poses": poses, "classes": cls, "scores": score})
        return out

    def predict_masks(self, X) -> list:
        """Per frame, binary (2, X, Y) drivable / lane masks."""
        out = []
        for _, _, pred in self._forward_all(X):
            if pred.seg is None:
                raise ValueError("model was trained without the segmentation branch")
            out.append((pred.seg.logits.data > 0).astype(np.float32))
        return out

    def evaluate(self, X) -> dict:
        from .pipeline import class_names
        from .training import evaluate_model
        check_is_fitted(self)
        return evaluate_model(self.model_, check_scenes(X), self.config_.decoder.num_classes, class_names())

    def score(self, X, y=None) -> float:
        """Mean average precision over the distance thresholds (mean IoU for segmentation-only models)."""
        rep = self.evaluate(X)
        return float(rep["mAP"]) if "mAP" in rep else float(rep["IoU"]["mean"])
