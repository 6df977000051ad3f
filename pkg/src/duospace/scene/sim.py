"""Deterministic synthetic multi-camera driving scenes with exact ground truth."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..geometry import POSE_DIM, CameraRig, EgoWarp, default_rig, rotation_z
from . import raster

__all__ = ["ObjectClass", "SceneSpec", "Frame", "Scene", "SceneSpecError", "generate",
           "default_classes", "DRIVABLE", "LANE"]

DRIVABLE, LANE = 0, 1


class SceneSpecError(ValueError):
    """The scene specification is invalid or its objects cannot be placed."""


@dataclass
class ObjectClass:
    name: str
    size_min: tuple  # (w, l, h) metres
    size_max: tuple
    color: tuple
    speed: tuple = (0.0, 0.0)  # m/s along heading
    on_road: bool = False

    def median_size(self) -> np.ndarray:
        return (np.asarray(self.size_min, float) + np.asarray(self.size_max, float)) / 2.0


def default_classes() -> list[ObjectClass]:
    return [
        ObjectClass("vehicle", (1.8, 4.0, 1.5), (2.1, 4.8, 1.8), (0.85, 0.15, 0.15), (2.0, 5.0), True),
        ObjectClass("pedestrian", (0.5, 0.5, 1.6), (0.8, 0.8, 1.9), (0.15, 0.25, 0.95), (0.5, 1.5)),
        ObjectClass("barrier", (0.4, 2.0, 0.9), (0.6, 2.6, 1.1), (0.95, 0.80, 0.10), (0.0, 0.0)),
    ]


@dataclass
class SceneSpec:
    seed: int = 0
    num_frames: int = 2
    dt: float = 0.5
    num_objects: int = 4
    classes: list = field(default_factory=default_classes)
    # ego trajectory: list of {"frames": n, "speed": m/s, "yaw_rate": rad/s}; sampled when empty
    ego_segments: list = field(default_factory=list)
    rig: CameraRig = field(default_factory=default_rig)
    bev_extent: tuple = (-24.0, 24.0, -24.0, 24.0)
    bev_resolution: tuple = (48, 48)
    road_width: float = 10.0
    lane_paint_width: float = 0.5
    lane_mask_halfwidth: float = 0.75
    min_ego_distance: float = 4.0
    edge_margin: float = 1.5

    def validate(self) -> None:
        if self.num_frames < 1:
            raise SceneSpecError("num_frames must be >= 1")
        if not self.dt > 0:
            raise SceneSpecError("dt must be > 0")
        if self.num_objects < 0:
            raise SceneSpecError("num_objects must be >= 0")
        for c in self.classes:
            if min(c.size_min) <= 0 or any(a > b for a, b in zip(c.size_min, c.size_max)):
                raise SceneSpecError(f"class {c.name}: size ranges must be positive and ordered")
        x0, x1, y0, y1 = self.bev_extent
        if not (x1 > x0 and y1 > y0):
            raise SceneSpecError("bev_extent must be increasing")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("rig", "classes")}
        d["classes"] = [asdict(c) for c in self.classes]
        d["rig"] = self.rig.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        classes = [ObjectClass(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in c.items()})
                   for c in d.pop("classes", [asdict(c) for c in default_classes()])]
        rig = CameraRig.from_dict(d.pop("rig")) if "rig" in d else default_rig()
        for key in ("bev_extent", "bev_resolution"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(classes=classes, rig=rig, **d)


@dataclass
class Frame:
    images: np.ndarray            # (N, H, W, 3) float32 in [0, 1]
    gt_poses: np.ndarray          # (G, 10) float64, ego frame
    gt_classes: np.ndarray        # (G,) int64
    ego_warp_to_prev: EgoWarp
    timestamp: float
    map_masks: np.ndarray         # (2, X, Y) float32 in {0, 1}
    track_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def gt_boxes(self) -> list:
        return list(zip(self.gt_poses, self.gt_classes))


@dataclass
class Scene:
    spec: SceneSpec
    frames: list

    @property
    def rig(self) -> CameraRig:
        return self.spec.rig

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class _Object:
    cls: int
    size: np.ndarray
    pos0: np.ndarray  # world xy at t=0
    yaw: float        # world heading
    vel: np.ndarray   # world xy velocity


def _ego_trajectory(spec: SceneSpec, rng: np.random.Generator):
    """World poses (yaw, xy) of the ego at each frame."""
    segments = spec.ego_segments
    if not segments:
        segments = [{"frames": spec.num_frames, "speed": float(rng.uniform(0.0, 5.0)),
                     "yaw_rate": float(rng.uniform(-0.1, 0.1))}]
    per_frame = []
    for seg in segments:
        per_frame += [(float(seg["speed"]), float(seg["yaw_rate"]))] * int(seg["frames"])
    while len(per_frame) < spec.num_frames:
        per_frame.append(per_frame[-1] if per_frame else (0.0, 0.0))
    yaw0 = float(rng.uniform(-0.15, 0.15))
    yaws, pos = [yaw0], [np.zeros(2)]
    for f in range(1, spec.num_frames):
        speed, rate = per_frame[f]
        yaw = yaws[-1] + rate * spec.dt
        heading = np.array([np.cos(yaw), np.sin(yaw)])
        pos.append(pos[-1] + speed * spec.dt * heading)
        yaws.append(yaw)
    return np.array(yaws), np.array(pos)


def _ego_matrix(yaw: float, xy: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation_z(yaw)
    m[:2, 3] = xy
    return m


def _place_objects(spec, rng, road_y, ego_yaws, ego_pos):
    x0, x1, y0, y1 = spec.bev_extent
    m = spec.edge_margin
    times = np.arange(spec.num_frames) * spec.dt
    placed: list[_Object] = []
    for k in range(spec.num_objects):
        cls_id = k % len(spec.classes)
        oc = spec.classes[cls_id]
        for _attempt in range(400):
            size = rng.uniform(oc.size_min, oc.size_max)
            speed = rng.uniform(*oc.speed) if oc.speed[1] > 0 else 0.0
            if oc.on_road:
                lane = rng.choice([-1.0, 1.0])
                yaw = (0.0 if lane < 0 else np.pi) + rng.uniform(-0.1, 0.1)
                half = spec.road_width / 2.0
                # keep the footprint inside the road band
                reach = 0.5 * (abs(np.sin(yaw)) * size[1] + abs(np.cos(yaw)) * size[0])
                lo = road_y + (0.0 if lane > 0 else -half) + reach + 0.2
                hi = road_y + (half if lane > 0 else 0.0) - reach - 0.2
                if hi <= lo:
                    continue
                wy = rng.uniform(lo, hi)
                wx = rng.uniform(x0 + m, x1 - m)
            else:
                yaw = rng.uniform(-np.pi, np.pi)
                wx = rng.uniform(x0 + m, x1 - m)
                wy = rng.uniform(y0 + m, y1 - m)
            vel = speed * np.array([np.cos(yaw), np.sin(yaw)])
            obj = _Object(cls_id, size, np.array([wx, wy]), float(yaw), vel)
            if _valid_track(spec, obj, placed, times, ego_yaws, ego_pos):
                placed.append(obj)
                break
        else:
            raise SceneSpecError(
                f"could not place object {k} ({oc.name}) inside the extent after 400 attempts")
    return placed


def _valid_track(spec, obj, placed, times, ego_yaws, ego_pos) -> bool:
    x0, x1, y0, y1 = spec.bev_extent
    m = spec.edge_margin
    r = 0.5 * np.hypot(obj.size[0], obj.size[1])
    for f, t in enumerate(times):
        pw = obj.pos0 + obj.vel * t
        pe = rotation_z(ego_yaws[f])[:2, :2].T @ (pw - ego_pos[f])
        if not (x0 + m <= pe[0] <= x1 - m and y0 + m <= pe[1] <= y1 - m):
            return False
        if np.hypot(*pe) < spec.min_ego_distance + r:
            return False
        for other in placed:
            po = other.pos0 + other.vel * t
            ro = 0.5 * np.hypot(other.size[0], other.size[1])
            if np.hypot(*(pw - po)) < r + ro + 0.5:
                return False
    return True


def _ground_colorizer(spec: SceneSpec, road_y: float):
    half = spec.road_width / 2.0
    paint = spec.lane_paint_width / 2.0
    lines = np.array([road_y - half, road_y, road_y + half])

    def color(xy: np.ndarray) -> np.ndarray:
        y = xy[:, 1]
        out = np.where((np.abs(y - road_y) <= half)[:, None], raster.ROAD, raster.GRASS)
        near_line = np.min(np.abs(y[:, None] - lines[None]), axis=1) <= paint
        out[near_line] = raster.PAINT
        return out

    return color, lines


def _map_masks(spec: SceneSpec, road_y: float, lines: np.ndarray, ego_m: np.ndarray) -> np.ndarray:
    x0, x1, y0, y1 = spec.bev_extent
    nx, ny = spec.bev_resolution
    cx = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    cy = y0 + (np.arange(ny) + 0.5) * (y1 - y0) / ny
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    pts = np.stack([gx, gy], axis=-1) @ ego_m[:2, :2].T + ego_m[:2, 3]
    wy = pts[..., 1]
    masks = np.zeros((2, nx, ny), dtype=np.float32)
    masks[DRIVABLE] = np.abs(wy - road_y) <= spec.road_width / 2.0
    masks[LANE] = np.min(np.abs(wy[..., None] - lines), axis=-1) <= spec.lane_mask_halfwidth
    return masks


def generate(spec: SceneSpec) -> Scene:
    """Simulate ``spec.num_frames`` frames; bit-identical for a fixed ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ego_yaws, ego_pos = _ego_trajectory(spec, rng)
    road_y = float(rng.uniform(-2.5, 2.5))
    objects = _place_objects(spec, rng, road_y, ego_yaws, ego_pos)
    colorize, lines = _ground_colorizer(spec, road_y)
    frames = []
    for f in range(spec.num_frames):
        t = f * spec.dt
        ego_m = _ego_matrix(ego_yaws[f], ego_pos[f])
        R_e = ego_m[:3, :3]
        poses = np.zeros((len(objects), POSE_DIM))
        faces = []
        for i, obj in enumerate(objects):
            pw = np.array([*(obj.pos0 + obj.vel * t), obj.size[2] / 2.0])
            pe = R_e.T @ (pw - ego_m[:3, 3])
            yaw_e = obj.yaw - ego_yaws[f]
            ve = R_e[:2, :2].T @ obj.vel
            poses[i] = [pe[0], pe[1], pe[2], obj.size[0], obj.size[1], obj.size[2],
                        np.sin(yaw_e), np.cos(yaw_e), ve[0], ve[1]]
            base = spec.classes[obj.cls].color
            for poly, normal, k in raster.box_faces(pe, obj.size, yaw_e):
                faces.append((poly, normal, raster.face_color(base, R_e @ normal, k)))
        images = []
        for cam in spec.rig.cameras:
            img = raster.render_background(cam, ego_m, colorize)
            raster.rasterize_faces(img, cam, faces)
            images.append(img)
        if f == 0:
            warp = EgoWarp.identity()
        else:
            prev = _ego_matrix(ego_yaws[f - 1], ego_pos[f - 1])
            rel = np.linalg.inv(prev) @ ego_m
            warp = EgoWarp(rel[:3, :3], rel[:3, 3])
        frames.append(Frame(
            images=np.clip(np.stack(images), 0.0, 1.0).astype(np.float32),
            gt_poses=poses,
            gt_classes=np.array([o.cls for o in objects], dtype=np.int64),
            ego_warp_to_prev=warp,
            timestamp=float(t),
            map_masks=_map_masks(spec, road_y, lines, ego_m),
            track_ids=np.arange(len(objects), dtype=np.int64),
        ))
    return Scene(spec, frames)
