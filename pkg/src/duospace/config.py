"""Run configuration: nested dataclasses plus a JSON schema generated from them."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .lifting import GridConfig
from .segmentation import SegConfig
from .training.losses import LossConfig

__all__ = ["ConfigError", "DataConfig", "RigConfig", "TemporalConfig", "ModelConfig", "TrainConfig",
           "RunConfig", "config_schema", "load_config", "config_from_dict", "config_to_dict"]


class ConfigError(ValueError):
    """Invalid configuration; ``pointer`` is the JSON pointer of the offending value."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


def _choices(*values):
    return field(default=values[0], metadata={"enum": list(values)})


def _bounded(default, minimum=None, exclusive_minimum=None, maximum=None):
    meta = {}
    if minimum is not None:
        meta["minimum"] = minimum
    if exclusive_minimum is not None:
        meta["exclusiveMinimum"] = exclusive_minimum
    if maximum is not None:
        meta["maximum"] = maximum
    return field(default=default, metadata=meta)


@dataclass
class DataConfig:
    num_scenes: int = _bounded(8, minimum=1)
    val_scenes: int = _bounded(2, minimum=0)
    num_frames: int = _bounded(2, minimum=1)
    num_objects: int = _bounded(4, minimum=0)
    dt: float = _bounded(0.5, exclusive_minimum=0)
    lane_mask_halfwidth: float = _bounded(0.75, exclusive_minimum=0)


@dataclass
class RigConfig:
    num_cameras: int = _bounded(4, minimum=1)
    image_size: list = field(default_factory=lambda: [128, 96])
    hfov_deg: float = _bounded(90.0, exclusive_minimum=0, maximum=170)
    height: float = 1.6
    pitch_deg: float = 8.0


@dataclass
class TemporalConfig:
    enabled: bool = False
    length: int = _bounded(2, minimum=1)


@dataclass
class ModelConfig:
    ablate: str = _choices("duo", "bev-only", "pv-only", "no-fde", "temporal-stacking", "temporal-attn")
    seg_mode: str = _choices("off", "joint", "only")


@dataclass
class TrainConfig:
    lr_backbone: float = _bounded(2e-5, minimum=0)
    lr_other: float = _bounded(2e-4, minimum=0)
    epochs: int = _bounded(24, minimum=1)
    max_steps: int = _bounded(0, minimum=0)        # 0: run all epochs
    batch_size: int = _bounded(1, minimum=1)
    weight_decay: float = _bounded(0.01, minimum=0)
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    clip_norm: float = _bounded(10.0, minimum=0)
    lr_floor: float = _bounded(0.01, minimum=0, maximum=1)
    seg_weight: float = _bounded(0.5, minimum=0)
    eval_every: int = _bounded(1, minimum=0)        # epochs between evals; 0 disables
    keep_checkpoints: int = _bounded(2, minimum=1)
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    seg: SegConfig = field(default_factory=SegConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)


# -- schema generation -----------------------------------------------------------------
_SCALARS = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def _array_schema(default) -> dict:
    items = list(default) if default is not None else []
    if items and all(isinstance(v, int) and not isinstance(v, bool) for v in items):
        kind = "integer"
    else:
        kind = "number"
    out = {"type": "array", "items": {"type": kind}}
    if isinstance(default, tuple):  # tuples are fixed-length vectors
        out["minItems"] = out["maxItems"] = len(items)
    return out


def _schema_for(cls) -> dict:
    hints = typing.get_type_hints(cls)
    props = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        default = _default_of(f)
        if dataclasses.is_dataclass(tp):
            props[f.name] = _schema_for(tp)
            continue
        if tp in (list, tuple):
            props[f.name] = _array_schema(default)
            continue
        if tp is float:
            sch = {"type": "number"}
        elif tp in _SCALARS:
            sch = {"type": _SCALARS[tp]}
        else:
            sch = {}
        sch.update(f.metadata)
        props[f.name] = sch
    return {"type": "object", "properties": props, "additionalProperties": False}


def config_schema() -> dict:
    schema = _schema_for(RunConfig)
    schema["$schema"] = "http://json-schema.org/draft-07/schema#"
    return schema


# -- (de)serialisation -------------------------------------------------------------------
def _build(cls, data: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        tp, value = hints[f.name], data[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, value)
        elif tp is tuple:
            kwargs[f.name] = tuple(value)
        elif tp is float:
            kwargs[f.name] = float(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    validator = jsonschema.Draft7Validator(config_schema())
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = list(err.absolute_path)
        if err.validator == "additionalProperties" and isinstance(err.instance, dict):
            path += sorted(set(err.instance) - set(err.schema.get("properties", {})))[:1]
        pointer = "".join(f"/{p}" for p in path)
        raise ConfigError(err.message, pointer)
    cfg = _build(RunConfig, data)
    try:
        cfg.decoder.validate()
    except ValueError as exc:
        raise ConfigError(str(exc), "/decoder") from None
    if len(cfg.training.loss.reg_weights) != 10:
        raise ConfigError("reg_weights needs 10 entries", "/training/loss/reg_weights")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be an object")
    return config_from_dict(data)
