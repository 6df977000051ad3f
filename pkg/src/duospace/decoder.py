"""Duo-space decoder: shared pose embedding, BEV/PV content embeddings, joint
self-attention, space-specific deformable cross-attention and pose refinement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import MLP, LayerNorm, Linear, Module, ModuleList, Parameter, Tensor, grid_sample
from .autodiff import functional as F
from .autodiff.tensor import get_default_dtype
from .encoder import FeaturePyramid
from .geometry import COS, MIN_SIZE, POSE_DIM, SIN, CameraRig, project_points
from .lifting import BevGrid

__all__ = [
    "DecoderConfig", "QueryState", "LayerPrediction", "full_extent", "pose_inputs", "PoseEncoder",
    "compose_duo_queries", "MultiHeadSelfAttention", "MSDeformAttn", "bev_reference_points",
    "pv_reference_points", "DecoderLayer", "DuoSpaceDecoder", "init_queries",
]

SPACE_MODES = ("duo", "bev-only", "pv-only")


@dataclass
class DecoderConfig:
    num_queries: int = 64
    num_layers: int = 2
    d_model: int = 64
    heads: int = 4
    points: int = 4            # sampling points per head per level
    num_classes: int = 3
    position_step: tuple = (2.0, 2.0, 0.5)  # metres per unit of regressed position delta
    velocity_scale: float = 2.0
    query_z: float = 0.5

    def validate(self) -> None:
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.num_queries < 1 or self.num_layers < 1:
            raise ValueError("num_queries and num_layers must be >= 1")


@dataclass
class QueryState:
    poses: np.ndarray       # (k, 10), gradient-stopped between layers
    content_bev: Tensor     # (k, D)
    content_pv: Tensor      # (k, D)


@dataclass
class LayerPrediction:
    logits: Tensor          # (k, num_classes)
    poses: Tensor           # (k, 10)
    raw_yaw: Optional[Tensor] = None  # (k, 2) (sin, cos) before renormalisation


def full_extent(extent) -> np.ndarray:
    """Pad an x/y extent with a unit z range so every consumer sees six bounds."""
    e = tuple(float(v) for v in extent)
    return np.asarray(e[:6] if len(e) >= 6 else e + (-1.0, 1.0))


def pose_inputs(poses: np.ndarray, extent: Sequence[float]) -> np.ndarray:
    """Standardise poses for the pose encoder: extent-scaled centres, log sizes, scaled velocity.

    ``extent`` is (x0, x1, y0, y1[, z0, z1]); without a z range the height passes through.
    """
    poses = np.asarray(poses, dtype=np.float64)
    e = full_extent(extent)
    centre = (e[1::2] + e[0::2]) / 2.0
    half = (e[1::2] - e[0::2]) / 2.0
    out = np.empty_like(poses)
    out[:, 0:3] = (poses[:, 0:3] - centre) / half
    out[:, 3:6] = np.log(np.maximum(poses[:, 3:6], MIN_SIZE))
    out[:, 6:8] = poses[:, 6:8]
    out[:, 8:10] = poses[:, 8:10] / 10.0
    return out


class PoseEncoder(Module):
    """``xi(Enc(P))``: a two-layer ReLU MLP followed by a linear map to the model width."""

    def __init__(self, d_model: int, rng: np.random.Generator):
        super().__init__()
        self.enc0 = Linear(POSE_DIM, d_model, rng)
        self.enc1 = Linear(d_model, d_model, rng)
        self.xi = Linear(d_model, d_model, rng)

    def forward(self, poses: np.ndarray, extent) -> Tensor:
        x = Tensor(pose_inputs(poses, extent))
        h = F.relu(self.enc1(F.relu(self.enc0(x))))
        return self.xi(h)


def compose_duo_queries(content_bev: Tensor, content_pv: Tensor, pose_embed: Tensor):
    """Both spaces add the same pose embedding to their own content."""
    return content_bev + pose_embed, content_pv + pose_embed


class MultiHeadSelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if width % heads:
            raise ValueError("width must be divisible by heads")
        self.heads = heads
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.o = Linear(width, width, rng)
        self.last_weights: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        n, width = x.shape
        h, dh = self.heads, width // self.heads

        def split(t):
            return F.transpose(F.reshape(t, (n, h, dh)), (1, 0, 2))  # (h, n, dh)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = F.matmul(q, F.swapaxes(k, 1, 2)) * (1.0 / np.sqrt(dh))
        attn = F.softmax(scores, axis=-1)
        self.last_weights = attn.data
        out = F.matmul(attn, v)                                   # (h, n, dh)
        out = F.reshape(F.transpose(out, (1, 0, 2)), (n, width))
        return self.o(out)


def _ring_bias(heads: int, levels: int, points: int) -> np.ndarray:
    angles = np.arange(heads) * (2.0 * np.pi / heads)
    grid = np.stack([np.cos(angles), np.sin(angles)], -1)
    grid = grid / np.abs(grid).max(-1, keepdims=True)
    bias = np.tile(grid[:, None, None, :], (1, levels, points, 1))
    bias *= np.arange(1, points + 1)[None, None, :, None]
    return bias.reshape(-1)


class MSDeformAttn(Module):
    """Multi-scale deformable attention over a list of per-view feature levels.

    Sampling offsets are predicted in units of each level's texels and added
    to the normalised reference point; attention weights are a softmax over
    all (level, point) pairs of a head.
    """

    def __init__(self, d_model: int, heads: int, levels: int, points: int, rng: np.random.Generator):
        super().__init__()
        self.d_model, self.heads, self.levels, self.points = d_model, heads, levels, points
        self.value_proj = Linear(d_model, d_model, rng)
        self.offsets = Linear(d_model, heads * levels * points * 2, rng, zero=True)
        self.offsets.bias.data[...] = _ring_bias(heads, levels, points)
        self.scores = Linear(d_model, heads * levels * points, rng, zero=True)
        self.out_proj = Linear(d_model, d_model, rng)
        self.last_weights: Optional[np.ndarray] = None

    def sampling(self, z: Tensor, ref: np.ndarray, shapes: Sequence[tuple]):
        """Sampling locations (G, k, heads, L, P, 2) and weights (k, heads, L, P)."""
        k = z.shape[0]
        h, L, P = self.heads, self.levels, self.points
        off = F.reshape(self.offsets(z), (k, h, L, P, 2))
        norm = np.array([[w, hh] for hh, w in shapes], dtype=z.dtype).reshape(1, 1, L, 1, 2)
        loc = Tensor(ref[:, :, None, None, None, :], dtype=z.dtype) + off / Tensor(norm)
        weights = F.softmax(F.reshape(self.scores(z), (k, h, L * P)), axis=-1)
        self.last_weights = weights.data
        return loc, F.reshape(weights, (k, h, L, P))

    def forward(self, z: Tensor, ref: np.ndarray, maps: Sequence[Tensor]) -> Tensor:
        """``z`` (k, D); ``ref`` (G, k, 2) normalised; ``maps[l]`` (G, D, H_l, W_l). Returns (G, k, D)."""
        if len(maps) != self.levels:
            raise ValueError(f"MSDeformAttn expects {self.levels} levels, got {len(maps)}")
        k, d = z.shape
        g = maps[0].shape[0]
        h, L, P = self.heads, self.levels, self.points
        dh = d // h
        ref = np.clip(np.asarray(ref, dtype=np.float64), 0.0, 1.0)
        loc, weights = self.sampling(z, ref, [m.shape[2:] for m in maps])
        per_level = []
        for lv, fmap in enumerate(maps):
            _, _, hh, ww = fmap.shape
            val = self.value_proj(F.transpose(fmap, (0, 2, 3, 1)))              # (G, H, W, D)
            val = F.transpose(F.reshape(val, (g, hh, ww, h, dh)), (0, 3, 4, 1, 2))
            val = F.reshape(val, (g * h, dh, hh, ww))
            pts = F.transpose(loc[:, :, :, lv], (0, 2, 1, 3, 4))                # (G, h, k, P, 2)
            pts = F.reshape(pts, (g * h, k * P, 2))
            s = F.reshape(grid_sample(val, pts), (g, h, k, P, dh))
            per_level.append(s)
        sampled = F.stack(per_level, axis=3)                                    # (G, h, k, L, P, dh)
        w = F.reshape(F.transpose(weights, (1, 0, 2, 3)), (1, h, k, L, P, 1))
        agg = F.sum(sampled * w, axis=(3, 4))                                   # (G, h, k, dh)
        agg = F.reshape(F.transpose(agg, (0, 2, 1, 3)), (g, k, d))
        return self.out_proj(agg)


def bev_reference_points(poses: np.ndarray, extent) -> np.ndarray:
    """Normalised ``(u, v)`` on a (C, X, Y) BEV map: ``u`` indexes Y (width), ``v`` indexes X."""
    x0, x1, y0, y1 = extent[:4]
    nx = (poses[:, 0] - x0) / (x1 - x0)
    ny = (poses[:, 1] - y0) / (y1 - y0)
    return np.clip(np.stack([ny, nx], axis=-1), 0.0, 1.0)[None]


def pv_reference_points(poses: np.ndarray, rig: CameraRig):
    u, v, _, valid = project_points(rig, poses[:, 0:3])
    w, h = rig.image_size
    ref = np.stack([u / w, v / h], axis=-1)
    ref = np.where(valid[..., None], ref, 0.5)
    return ref, valid


@dataclass
class SpaceContext:
    """Features of one timestamp as seen by the cross-attention layers."""
    bev: Optional[BevGrid]
    pyramid: Optional[FeaturePyramid]
    rig: CameraRig


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, num_levels: int, extent, rng: np.random.Generator,
                 temporal: bool = False):
        super().__init__()
        d = cfg.d_model
        self.cfg = cfg
        self.extent = tuple(extent)
        self.pose_encoder = PoseEncoder(d, rng)
        self.self_attn = MultiHeadSelfAttention(2 * d, cfg.heads, rng)
        self.norm_sa_bev = LayerNorm(d)
        self.norm_sa_pv = LayerNorm(d)
        self.bev_attn = MSDeformAttn(d, cfg.heads, 1, cfg.points, rng)
        self.norm_bev = LayerNorm(d)
        self.pv_attn = MSDeformAttn(d, cfg.heads, num_levels, cfg.points, rng)
        self.norm_pv = LayerNorm(d)
        self.ffn = MLP([2 * d, 4 * d, 2 * d], rng)
        self.norm_ffn_bev = LayerNorm(d)
        self.norm_ffn_pv = LayerNorm(d)
        self.cls_head = Linear(2 * d, cfg.num_classes, rng)
        self.cls_head.bias.data[...] = -np.log((1 - 0.01) / 0.01)
        self.reg_head = MLP([2 * d, 2 * d, POSE_DIM], rng, zero_last=True)
        self.temporal = temporal
        if temporal:
            self.temporal_bev = MLP([2 * d, d, d, d], rng)
            self.temporal_pv = MLP([2 * d, d, d, d], rng)

    # -- sublayers ---------------------------------------------------------------
    def self_attend(self, z_bev: Tensor, z_pv: Tensor, c_bev: Tensor, c_pv: Tensor):
        d = z_bev.shape[1]
        out = self.self_attn(F.concat([z_bev, z_pv], axis=1))
        c_bev = self.norm_sa_bev(c_bev + out[:, :d])
        c_pv = self.norm_sa_pv(c_pv + out[:, d:])
        return c_bev, c_pv

    def bev_attention(self, z_bev: Tensor, poses: np.ndarray, bev: BevGrid) -> Tensor:
        ref = bev_reference_points(poses, bev.extent)
        fmap = F.reshape(bev.features, (1,) + bev.features.shape)
        return self.bev_attn(z_bev, ref, [fmap])[0]

    def pv_attention(self, z_pv: Tensor, poses: np.ndarray, pyramid: FeaturePyramid,
                     rig: CameraRig) -> Tensor:
        ref, valid = pv_reference_points(poses, rig)
        out = self.pv_attn(z_pv, ref, pyramid.levels)                # (N, k, D)
        count = valid.sum(axis=0)
        wts = (valid / np.maximum(count, 1)[None]).astype(z_pv.dtype)
        return F.sum(out * Tensor(wts[..., None], dtype=z_pv.dtype), axis=0)

    def bev_cross_attend(self, z_bev, c_bev, poses, bev):
        return self.norm_bev(c_bev + self.bev_attention(z_bev, poses, bev))

    def pv_cross_attend(self, z_pv, c_pv, poses, pyramid, rig):
        return self.norm_pv(c_pv + self.pv_attention(z_pv, poses, pyramid, rig))

    def temporal_attention(self, c_bev: Tensor, c_pv: Tensor, temporal_poses: Sequence[np.ndarray],
                           contexts: Sequence[SpaceContext], mode: str):
        """Per-timestamp space-specific attention, aggregated oldest to newest by shared MLPs.

        ``temporal_poses[j]`` and ``contexts[j]`` are ``j`` frames in the past.
        """
        outs_bev, outs_pv = [], []
        for poses_t, ctx in zip(temporal_poses, contexts):
            q_pose = self.pose_encoder(poses_t, self.extent)
            z_bev, z_pv = compose_duo_queries(c_bev, c_pv, q_pose)
            outs_bev.append(self.bev_attention(z_bev, poses_t, ctx.bev) if mode != "pv-only" else None)
            outs_pv.append(self.pv_attention(z_pv, poses_t, ctx.pyramid, ctx.rig) if mode != "bev-only" else None)
        agg_bev = _recurrent(self.temporal_bev, outs_bev[::-1]) if mode != "pv-only" else None
        agg_pv = _recurrent(self.temporal_pv, outs_pv[::-1]) if mode != "bev-only" else None
        return agg_bev, agg_pv, outs_bev, outs_pv

    # -- full layer ----------------------------------------------------------------
    def forward(self, state: QueryState, contexts: Sequence[SpaceContext],
                temporal_poses: Optional[Sequence[np.ndarray]] = None, mode: str = "duo"):
        """Run one layer; ``contexts[0]`` is the current frame, later entries are past frames."""
        poses = state.poses
        q_pose = self.pose_encoder(poses, self.extent)
        z_bev, z_pv = compose_duo_queries(state.content_bev, state.content_pv, q_pose)
        c_bev, c_pv = self.self_attend(z_bev, z_pv, state.content_bev, state.content_pv)
        cur = contexts[0]
        if self.temporal and temporal_poses is not None:
            agg_bev, agg_pv, _, _ = self.temporal_attention(
                c_bev, c_pv, temporal_poses, contexts[: len(temporal_poses)], mode)
            if agg_bev is not None:
                c_bev = self.norm_bev(c_bev + agg_bev)
            if agg_pv is not None:
                c_pv = self.norm_pv(c_pv + agg_pv)
        else:
            z_bev, z_pv = compose_duo_queries(c_bev, c_pv, q_pose)
            if mode != "pv-only":
                c_bev = self.bev_cross_attend(z_bev, c_bev, poses, cur.bev)
            if mode != "bev-only":
                c_pv = self.pv_cross_attend(z_pv, c_pv, poses, cur.pyramid, cur.rig)
        d = c_bev.shape[1]
        joint = F.concat([c_bev, c_pv], axis=1)
        joint = joint + self.ffn(joint)
        c_bev = self.norm_ffn_bev(joint[:, :d])
        c_pv = self.norm_ffn_pv(joint[:, d:])
        feats = F.concat([c_bev, c_pv], axis=1)
        logits = self.cls_head(feats)
        delta = self.reg_head(feats)
        new_poses, raw_yaw = self.update_poses(poses, delta, with_raw_yaw=True)
        nxt = QueryState(new_poses.data.astype(np.float64), c_bev, c_pv)
        return nxt, LayerPrediction(logits, new_poses, raw_yaw)

    def update_poses(self, poses: np.ndarray, delta: Tensor, with_raw_yaw: bool = False):
        """Centres step by ``delta * position_step``; sizes add and clamp; yaw adds and renormalises;
        velocity is replaced by ``delta * velocity_scale``.

        With ``with_raw_yaw`` the un-normalised (sin, cos) sum is returned as well.
        """
        dtype = delta.dtype
        p = Tensor(poses, dtype=dtype)
        step = Tensor(np.asarray(self.cfg.position_step, dtype=dtype))
        xyz = p[:, 0:3] + delta[:, 0:3] * step
        size = F.maximum(p[:, 3:6] + delta[:, 3:6], MIN_SIZE)
        raw = p[:, SIN:COS + 1] + delta[:, SIN:COS + 1]
        sc = raw / F.maximum(F.sqrt(F.sum(F.square(raw), axis=1, keepdims=True)), 1e-6)
        vel = delta[:, 8:10] * self.cfg.velocity_scale
        out = F.concat([xyz, size, sc, vel], axis=1)
        return (out, raw) if with_raw_yaw else out


def _recurrent(mlp: MLP, outputs_oldest_first: Sequence[Tensor]) -> Tensor:
    h = outputs_oldest_first[0]
    for o in outputs_oldest_first:
        h = mlp(F.concat([h, o], axis=1))
    return h


def init_queries(cfg: DecoderConfig, extent, size_prior, seed: int = 0,
                 rng: Optional[np.random.Generator] = None):
    """Grid-initialised poses (k, 10) and N(0, 0.02) content embeddings (k, D) x 2.

    ``size_prior`` is one (w, l, h) or a per-class table that is cycled over the queries.
    A non-square ``k`` uses the next larger grid truncated row-major.
    """
    k = cfg.num_queries
    n = int(np.ceil(np.sqrt(k)))
    x0, x1, y0, y1 = extent[:4]
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    centres = np.stack([gx.reshape(-1), gy.reshape(-1)], -1)[:k]
    poses = np.zeros((k, POSE_DIM))
    poses[:, 0:2] = centres
    poses[:, 2] = cfg.query_z
    prior = np.atleast_2d(np.asarray(size_prior, float))
    poses[:, 3:6] = prior[np.arange(k) % len(prior)]  # cycle class priors over the grid
    poses[:, SIN], poses[:, COS] = 0.0, 1.0
    rng = rng if rng is not None else np.random.default_rng(seed)
    dtype = get_default_dtype()
    bev = (rng.standard_normal((k, cfg.d_model)) * 0.02).astype(dtype)
    pv = (rng.standard_normal((k, cfg.d_model)) * 0.02).astype(dtype)
    return poses, bev, pv


class DuoSpaceDecoder(Module):
    def __init__(self, cfg: DecoderConfig, num_levels: int, extent, size_prior,
                 rng: np.random.Generator, temporal: bool = False):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.extent = tuple(extent)
        poses, bev, pv = init_queries(cfg, extent, size_prior, rng=rng)
        self.init_poses = poses
        self.content_bev = Parameter(bev)
        self.content_pv = Parameter(pv)
        self.layers = ModuleList([DecoderLayer(cfg, num_levels, extent, rng, temporal)
                                  for _ in range(cfg.num_layers)])

    @property
    def temporal(self) -> bool:
        return self.layers[0].temporal

    def forward(self, contexts: Sequence[SpaceContext], time_steps=None, mode: str = "duo",
                temporal_fn=None) -> list:
        """Per-layer predictions (deep supervision list of length ``num_layers``).

        ``temporal_fn(poses)`` maps current poses to the list of temporal poses
        when temporal decoding is active.
        """
        if mode not in SPACE_MODES:
            raise ValueError(f"unknown space mode {mode!r}")
        state = QueryState(self.init_poses.copy(), self.content_bev, self.content_pv)
        preds = []
        for layer in self.layers:
            tposes = temporal_fn(state.poses) if (temporal_fn is not None and layer.temporal) else None
            state, pred = layer(state, contexts, tposes, mode)
            preds.append(pred)
        return preds
