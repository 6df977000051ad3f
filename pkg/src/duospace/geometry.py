"""Pinhole camera rigs, rigid ego warps and pose motion compensation.

Frames: ego is x forward, y left, z up. Cameras use the optical convention
(x right, y down, z along the viewing ray). ``Camera.T`` maps ego-frame
points into the camera frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MIN_DEPTH = 0.05
POSE_DIM = 10
MIN_SIZE = 0.1

# PoseVector layout
X, Y, Z, W, L, H, SIN, COS, VX, VY = range(POSE_DIM)

__all__ = [
    "Camera", "CameraRig", "EgoWarp", "PoseVector", "project_point", "project_points",
    "backproject", "motion_compensate", "motion_compensate_array", "compose_warps",
    "default_rig", "rotation_z", "MIN_DEPTH", "POSE_DIM",
]


def rotation_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _check_rotation(R: np.ndarray, what: str, tol: float = 1e-9) -> None:
    if R.shape != (3, 3):
        raise ValueError(f"{what}: rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError(f"{what}: rotation block is not orthonormal with det=+1")


@dataclass
class Camera:
    K: np.ndarray
    T: np.ndarray
    image_size: tuple[int, int]  # (W, H)

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.K.shape != (3, 3) or self.T.shape != (4, 4):
            raise ValueError("Camera: K must be 3x3 and T 4x4")
        if self.K[2, 2] != 1.0 or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("Camera: intrinsics need K[2][2]=1 and positive focal lengths")
        _check_rotation(self.T[:3, :3], "Camera.T")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Camera optical centre in ego coordinates."""
        return -self.T[:3, :3].T @ self.T[:3, 3]

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "T": self.T.tolist(), "image_size": list(self.image_size)}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["K"]), np.array(d["T"]), tuple(d["image_size"]))


@dataclass
class CameraRig:
    cameras: list[Camera] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cameras)

    def __getitem__(self, i) -> Camera:
        return self.cameras[i]

    @property
    def image_size(self) -> tuple[int, int]:
        sizes = {c.image_size for c in self.cameras}
        if len(sizes) != 1:
            raise ValueError("rig cameras have differing image sizes")
        return sizes.pop()

    def permuted(self, order: Sequence[int]) -> "CameraRig":
        return CameraRig([self.cameras[i] for i in order])

    def to_dict(self) -> dict:
        return {"cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraRig":
        return cls([Camera.from_dict(c) for c in d["cameras"]])


def default_rig(num_cameras: int = 4, image_size=(128, 96), hfov_deg: float = 90.0,
                height: float = 1.6, forward_offset: float = 0.5, pitch_deg: float = 8.0) -> CameraRig:
    """Cameras evenly spaced in yaw around the ego origin, pitched ``pitch_deg`` down."""
    w, h = image_size
    f = (w / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
    K = np.array([[f, 0.0, w / 2.0], [0.0, f, h / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for i in range(num_cameras):
        yaw = 2.0 * np.pi * i / num_cameras
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        p = np.radians(pitch_deg)
        fwd, down = np.cos(p) * fwd + np.sin(p) * down, np.cos(p) * down - np.sin(p) * fwd
        R = np.stack([right, down, fwd])
        c = np.array([np.cos(yaw), np.sin(yaw), 0.0]) * forward_offset + np.array([0.0, 0.0, height])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ c
        cams.append(Camera(K.copy(), T, (w, h)))
    return CameraRig(cams)


def project_points(rig: CameraRig, points: np.ndarray):
    """Project ego points (P, 3) into every camera.

    Returns ``u, v, depth, valid`` each shaped (N, P).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(rig)
    u = np.empty((n, len(pts)))
    v = np.empty_like(u)
    depth = np.empty_like(u)
    valid = np.empty(u.shape, dtype=bool)
    for i, cam in enumerate(rig.cameras):
        pc = pts @ cam.T[:3, :3].T + cam.T[:3, 3]
        z = pc[:, 2]
        safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
        uvw = pc @ cam.K.T
        u[i] = uvw[:, 0] / safe
        v[i] = uvw[:, 1] / safe
        depth[i] = z
        valid[i] = (z > MIN_DEPTH) & (u[i] >= 0) & (u[i] < cam.width) & (v[i] >= 0) & (v[i] < cam.height)
    return u, v, depth, valid


def project_point(rig: CameraRig, cam_index: int, p) -> tuple[float, float, float, bool]:
    if not 0 <= cam_index < len(rig):
        raise IndexError(f"camera index {cam_index} out of range for {len(rig)} cameras")
    u, v, d, ok = project_points(CameraRig([rig[cam_index]]), np.asarray(p, dtype=np.float64)[None])
    return float(u[0, 0]), float(v[0, 0]), float(d[0, 0]), bool(ok[0, 0])


def backproject(rig: CameraRig, cam_index: int, u: float, v: float, depth: float) -> np.ndarray:
    cam = rig[cam_index]
    ray = np.linalg.solve(cam.K, np.array([u, v, 1.0]))
    pc = ray * depth
    R, t = cam.T[:3, :3], cam.T[:3, 3]
    return R.T @ (pc - t)


@dataclass
class EgoWarp:
    """Rigid map from ego coordinates at frame t to ego coordinates at frame t-1."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        _check_rotation(self.R, "EgoWarp")

    @classmethod
    def identity(cls) -> "EgoWarp":
        return cls()

    def apply(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.R.T + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EgoWarp":
        return cls(np.array(d["R"]), np.array(d["t"]))


def compose_warps(a: EgoWarp, b: EgoWarp) -> EgoWarp:
    """Warp equal to applying ``b`` first, then ``a``."""
    return EgoWarp(a.R @ b.R, a.R @ b.t + a.t)


@dataclass
class PoseVector:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    w: float = 1.0
    l: float = 1.0  # noqa: E741
    h: float = 1.0
    sin_yaw: float = 0.0
    cos_yaw: float = 1.0
    vx: float = 0.0
    vy: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h,
                         self.sin_yaw, self.cos_yaw, self.vx, self.vy], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "PoseVector":
        a = np.asarray(a, dtype=np.float64).reshape(POSE_DIM)
        return cls(*(float(v) for v in a))

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.sin_yaw, self.cos_yaw))

    def normalized(self) -> "PoseVector":
        a = self.to_array()
        n = np.hypot(a[SIN], a[COS])
        if n > 0:
            a[SIN:COS + 1] /= n
        else:
            a[SIN], a[COS] = 0.0, 1.0
        a[W:H + 1] = np.maximum(a[W:H + 1], MIN_SIZE)
        return PoseVector.from_array(a)


def motion_compensate_array(poses: np.ndarray, warp: EgoWarp, dt: float) -> np.ndarray:
    """Express (K, 10) current-frame poses at the previous timestamp.

    Object motion is rolled back under a constant-velocity model, then the
    ego warp maps position, heading and velocity into the previous frame.
    """
    if dt < 0:
        raise ValueError("motion_compensate: dt must be non-negative")
    poses = np.asarray(poses, dtype=np.float64)
    out = poses.copy()
    pos = poses[..., X:Z + 1].copy()
    pos[..., :2] -= dt * poses[..., VX:VY + 1]
    out[..., X:Z + 1] = pos @ warp.R.T + warp.t
    zeros = np.zeros(poses.shape[:-1] + (1,))
    heading = np.concatenate([poses[..., COS:COS + 1], poses[..., SIN:SIN + 1], zeros], -1) @ warp.R.T
    heading = heading[..., :2]
    norm = np.linalg.norm(heading, axis=-1, keepdims=True)
    # unit headings pass through untouched so identity warps are exact
    drift = (norm > 0) & (np.abs(norm - 1.0) > 1e-12)
    heading = heading / np.where(drift, norm, 1.0)
    out[..., COS] = heading[..., 0]
    out[..., SIN] = heading[..., 1]
    vel = np.concatenate([poses[..., VX:VY + 1], zeros], -1) @ warp.R.T
    out[..., VX:VY + 1] = vel[..., :2]
    return out


def motion_compensate(pose: PoseVector, warp: EgoWarp, dt: float) -> PoseVector:
    return PoseVector.from_array(motion_compensate_array(pose.to_array()[None], warp, dt)[0])
