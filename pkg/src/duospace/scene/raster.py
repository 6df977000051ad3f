"""Flat-shaded cuboid rasterizer over a ground-plane background."""
from __future__ import annotations

import numpy as np

from ..geometry import Camera

SKY = np.array([0.55, 0.70, 0.90])
GRASS = np.array([0.25, 0.42, 0.22])
ROAD = np.array([0.34, 0.34, 0.37])
PAINT = np.array([0.93, 0.93, 0.90])
LIGHT = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
NEAR = 0.1

# corner order: bit0 -> +l/2 along heading, bit1 -> +w/2 to the left, bit2 -> top
_FACES = (
    ((1, 3, 7, 5), (1, 0, 0)),    # front
    ((0, 4, 6, 2), (-1, 0, 0)),   # back
    ((2, 6, 7, 3), (0, 1, 0)),    # left
    ((0, 1, 5, 4), (0, -1, 0)),   # right
    ((4, 5, 7, 6), (0, 0, 1)),    # top
    ((0, 2, 3, 1), (0, 0, -1)),   # bottom
)

__all__ = ["box_corners", "box_faces", "pixel_rays", "render_background", "rasterize_faces",
           "face_color", "polygon_mask"]


def box_corners(center, size, yaw: float) -> np.ndarray:
    """Eight corners (8, 3) of a box; ``size`` is (w, l, h), ``center`` its centroid."""
    w, l, h = size
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.empty((8, 3))
    for i in range(8):
        dl = (l / 2) * (1 if i & 1 else -1)
        dw = (w / 2) * (1 if i & 2 else -1)
        dh = (h / 2) * (1 if i & 4 else -1)
        out[i] = (center[0] + c * dl - s * dw, center[1] + s * dl + c * dw, center[2] + dh)
    return out


def box_faces(center, size, yaw: float):
    """Yield ``(polygon (4, 3), outward normal (3,), face name index)``."""
    corners = box_corners(center, size, yaw)
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    for k, (idx, n) in enumerate(_FACES):
        yield corners[list(idx)], rot @ np.array(n, dtype=float), k


def face_color(base, normal, face_index: int) -> np.ndarray:
    shade = 0.55 + 0.45 * max(0.0, float(normal @ LIGHT))
    col = np.asarray(base, dtype=float) * shade
    if face_index == 0:
        # the heading face is tinted so orientation is observable
        col = 0.6 * col + 0.4 * np.array([1.0, 1.0, 1.0])
    return col


def pixel_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions (H, W, 3) through pixel centres, in ego coordinates, and the camera centre."""
    w, h = cam.image_size
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    pix = np.stack([jj, ii, np.ones_like(jj)], axis=-1)
    rays_c = pix @ np.linalg.inv(cam.K).T
    R = cam.T[:3, :3]
    rays = rays_c @ R  # R^T applied to row vectors
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    return rays, cam.center


def render_background(cam: Camera, ego_to_world: np.ndarray, ground_color) -> np.ndarray:
    """Ground plane (coloured by ``ground_color(xy_world)``) under a flat sky."""
    rays, origin = pixel_rays(cam)
    Rw, tw = ego_to_world[:3, :3], ego_to_world[:3, 3]
    rays_w = rays @ Rw.T
    org_w = Rw @ origin + tw
    img = np.broadcast_to(SKY, rays.shape[:2] + (3,)).copy()
    down = rays_w[..., 2] < -1e-6
    s = np.where(down, -org_w[2] / np.where(down, rays_w[..., 2], -1.0), 0.0)
    hit = org_w[:2] + s[..., None] * rays_w[..., :2]
    ground = down & (s < 150.0)
    img[ground] = ground_color(hit[ground])
    return img


def _clip_near(poly: np.ndarray, near: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a camera-frame polygon against ``z >= near``."""
    out = []
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ina, inb = a[2] >= near, b[2] >= near
        if ina:
            out.append(a)
        if ina != inb:
            t = (near - a[2]) / (b[2] - a[2])
            out.append(a + t * (b - a))
    return np.array(out) if out else np.zeros((0, 3))


def polygon_mask(uv: np.ndarray, width: int, height: int) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Pixel-centre coverage of a convex polygon ``uv`` (M, 2); returns (mask, window)."""
    u0 = max(int(np.floor(uv[:, 0].min() - 0.5)), 0)
    u1 = min(int(np.ceil(uv[:, 0].max() + 0.5)), width)
    v0 = max(int(np.floor(uv[:, 1].min() - 0.5)), 0)
    v1 = min(int(np.ceil(uv[:, 1].max() + 0.5)), height)
    if u0 >= u1 or v0 >= v1:
        return np.zeros((0, 0), dtype=bool), (slice(0, 0), slice(0, 0))
    jj, ii = np.meshgrid(np.arange(u0, u1) + 0.5, np.arange(v0, v1) + 0.5)
    area = 0.0
    m = len(uv)
    for k in range(m):
        a, b = uv[k], uv[(k + 1) % m]
        area += a[0] * b[1] - b[0] * a[1]
    sign = 1.0 if area >= 0 else -1.0
    inside = np.ones(jj.shape, dtype=bool)
    for k in range(m):
        a, b = uv[k], uv[(k + 1) % m]
        cross = (b[0] - a[0]) * (ii - a[1]) - (b[1] - a[1]) * (jj - a[0])
        inside &= sign * cross >= -1e-9
    return inside, (slice(v0, v1), slice(u0, u1))


def rasterize_faces(img: np.ndarray, cam: Camera, faces) -> np.ndarray:
    """Paint ``faces`` = [(polygon_ego (4,3), normal_ego (3,), colour)] far-to-near with back-face culling."""
    origin = cam.center
    R, t = cam.T[:3, :3], cam.T[:3, 3]
    drawable = []
    for poly, normal, color in faces:
        centre = poly.mean(axis=0)
        if normal @ (centre - origin) >= 0:
            continue
        pc = _clip_near(poly @ R.T + t, NEAR)
        if len(pc) < 3:
            continue
        drawable.append((float(np.linalg.norm(centre - origin)), pc, color))
    drawable.sort(key=lambda d: -d[0])
    for _, pc, color in drawable:
        uvw = pc @ cam.K.T
        uv = uvw[:, :2] / uvw[:, 2:3]
        mask, (rs, cs) = polygon_mask(uv, cam.width, cam.height)
        if mask.size:
            img[rs, cs][mask] = color
    return img
