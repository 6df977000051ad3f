"""Glue between a :class:`RunConfig` and the scene, model and trainer objects."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig, config_to_dict
from .geometry import CameraRig, default_rig
from .model import DuoSpaceModel
from .scene import SceneSpec, default_classes, generate, read_scenes

__all__ = ["DataError", "build_rig", "scene_spec", "generate_scenes", "build_model", "class_names",
           "size_priors", "read_split", "split_names", "train_run"]


class DataError(RuntimeError):
    """Missing or unusable input data or checkpoint."""


# offset keeping validation scenes disjoint from training scenes
VAL_SEED_OFFSET = 1_000_003


def build_rig(cfg: RunConfig) -> CameraRig:
    r = cfg.rig
    return default_rig(num_cameras=r.num_cameras, image_size=tuple(r.image_size), hfov_deg=r.hfov_deg,
                       height=r.height, pitch_deg=r.pitch_deg)


def scene_spec(cfg: RunConfig, seed: int) -> SceneSpec:
    d = cfg.data
    return SceneSpec(seed=seed, num_frames=d.num_frames, dt=d.dt, num_objects=d.num_objects,
                     rig=build_rig(cfg), bev_extent=tuple(cfg.grid.extent[:4]),
                     bev_resolution=tuple(cfg.grid.resolution[:2]),
                     lane_mask_halfwidth=d.lane_mask_halfwidth)


def generate_scenes(cfg: RunConfig, seed: int | None = None):
    """``(train, val)`` scene lists drawn deterministically from ``seed``."""
    seed = cfg.seed if seed is None else seed
    train = [generate(scene_spec(cfg, seed * 7919 + i)) for i in range(cfg.data.num_scenes)]
    val = [generate(scene_spec(cfg, VAL_SEED_OFFSET + seed * 7919 + i)) for i in range(cfg.data.val_scenes)]
    return train, val


def class_names(classes=None) -> list:
    return [c.name for c in (classes or default_classes())]


def size_priors(classes=None) -> np.ndarray:
    return np.stack([c.median_size() for c in (classes or default_classes())])


def build_model(cfg: RunConfig, rig: CameraRig | None = None, classes=None, seed: int | None = None) -> DuoSpaceModel:
    classes = classes or default_classes()
    cfg.decoder.num_classes = len(classes)
    return DuoSpaceModel(
        rig or build_rig(cfg), grid=cfg.grid, encoder=cfg.encoder, decoder=cfg.decoder, seg=cfg.seg,
        size_prior=size_priors(classes), seed=cfg.seed if seed is None else seed,
        ablate=cfg.model.ablate, seg_mode=cfg.model.seg_mode, temporal=cfg.temporal.enabled,
        temporal_length=cfg.temporal.length)


def split_names(data) -> dict | None:
    index = Path(data) / "dataset.json"
    if not index.is_file():
        return None
    return json.loads(index.read_text()).get("split", {})


def read_split(data, split: str | None):
    if not Path(data).exists():
        raise DataError(f"data directory {data} does not exist")
    return read_scenes(data, split)


def train_run(cfg: RunConfig, data, out, resume: bool = False, quiet: bool = False):
    """Train on the ``train`` split of ``data`` (validating on ``val``); returns (model, trainer, result, scenes)."""
    from .training import Trainer
    data, out = Path(data), Path(out)
    splits = split_names(data)
    train = read_split(data, "train" if splits else None)
    val = read_split(data, "val") if (splits or {}).get("val") else []
    model = build_model(cfg)
    trainer = Trainer(model, cfg.training, train, val, out_dir=out, seed=cfg.seed,
                      num_classes=cfg.decoder.num_classes, class_names=class_names(),
                      run_meta={"config": config_to_dict(cfg)})

    def progress(rec):
        if not quiet and (rec["step"] % 10 == 0 or rec["step"] == 1):
            print(f"step {rec['step']:5d}/{trainer.total_steps}  loss {rec['total']:.4f}", flush=True)

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")
    result = trainer.run(resume=resume, progress=progress)
    return model, trainer, result, train
