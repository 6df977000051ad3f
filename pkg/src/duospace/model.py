"""End-to-end detector: encoder, lifting, divergence enhancement, duo decoder, map head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import Conv2d, Module, Tensor, grid_sample, no_grad
from .autodiff import functional as F
from .decoder import DecoderConfig, DuoSpaceDecoder, SpaceContext
from .encoder import EncoderConfig, FeaturePyramid, ImageEncoder
from .geometry import CameraRig, EgoWarp
from .lifting import BevGrid, FeatureDivergence, GridConfig, bev_cell_centers, enhance_and_reduce, lift
from .segmentation import SegConfig, SegHead, SegOutput
from .temporal import FeatureMemory, MemoryEntry, temporal_poses

__all__ = ["ABLATIONS", "SEG_MODES", "ModelOutput", "DuoSpaceModel", "warp_bev", "images_to_tensor"]

ABLATIONS = ("duo", "bev-only", "pv-only", "no-fde", "temporal-stacking", "temporal-attn")
SEG_MODES = ("off", "joint", "only")


@dataclass
class ModelOutput:
    layers: list                    # per-layer LayerPrediction, empty when detection is off
    seg: Optional[SegOutput] = None
    bev: Optional[BevGrid] = None
    pyramid: Optional[FeaturePyramid] = None
    extras: dict = field(default_factory=dict)


def images_to_tensor(images: np.ndarray) -> Tensor:
    """(N, H, W, 3) -> (N, 3, H, W)."""
    return Tensor(np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2))))


def warp_bev(prev: BevGrid, warp: EgoWarp) -> Tensor:
    """Resample a previous-frame BEV map onto the current frame's cells; out-of-map cells are 0."""
    c, nx, ny = prev.features.shape
    centres = bev_cell_centers(prev.extent, prev.resolution).reshape(-1, 2)
    pts = np.concatenate([centres, np.zeros((len(centres), 1))], axis=1)
    back = warp.apply(pts)
    x0, x1, y0, y1 = prev.extent
    v = (back[:, 0] - x0) / (x1 - x0)
    u = (back[:, 1] - y0) / (y1 - y0)
    inside = ((u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)).astype(prev.features.dtype)
    fmap = F.reshape(prev.features, (1, c, nx, ny))
    s = grid_sample(fmap, Tensor(np.stack([u, v], -1)[None], dtype=fmap.dtype))[0]   # (P, C)
    s = s * Tensor(inside[:, None], dtype=fmap.dtype)
    return F.reshape(F.transpose(s, (1, 0)), (c, nx, ny))


class BevStacking(Module):
    """Comparison baseline: concatenate the warped previous BEV and reduce with a 1x1 conv."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.reduce = Conv2d(2 * channels, channels, 1, rng)

    def forward(self, cur: Tensor, prev: Tensor) -> Tensor:
        c, nx, ny = cur.shape
        x = F.reshape(F.concat([cur, prev], axis=0), (1, 2 * c, nx, ny))
        return F.reshape(self.reduce(x), (c, nx, ny))


class BevGatedAttention(Module):
    """Comparison baseline: per-cell softmax gate over the current and warped previous BEV."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.score = Conv2d(channels, 1, 1, rng)

    def forward(self, cur: Tensor, prev: Tensor) -> Tensor:
        c, nx, ny = cur.shape
        both = F.reshape(F.stack([cur, prev], axis=0), (2, c, nx, ny))
        gate = F.softmax(F.reshape(self.score(both), (2, 1, nx, ny)), axis=0)
        return F.sum(both * gate, axis=0)


class DuoSpaceModel(Module):
    """Multi-camera detector with an optional BEV map head.

    ``ablate`` selects which parts run; ``seg_mode`` is ``off``, ``joint`` or ``only``.
    """

    def __init__(self, rig: CameraRig, grid: GridConfig | None = None,
                 encoder: EncoderConfig | None = None, decoder: DecoderConfig | None = None,
                 seg: SegConfig | None = None, size_prior=None, seed: int = 0,
                 ablate: str = "duo", seg_mode: str = "off", temporal: bool = False,
                 temporal_length: int = 2):
        super().__init__()
        if ablate not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablate!r}; choose from {ABLATIONS}")
        if seg_mode not in SEG_MODES:
            raise ValueError(f"unknown seg mode {seg_mode!r}; choose from {SEG_MODES}")
        self.rig = rig
        self.grid = grid or GridConfig()
        self.encoder_cfg = encoder or EncoderConfig()
        self.decoder_cfg = decoder or DecoderConfig()
        self.seg_cfg = seg or SegConfig()
        self.ablate, self.seg_mode = ablate, seg_mode
        self.temporal_decoder = bool(temporal) and ablate not in ("temporal-stacking", "temporal-attn")
        self.temporal_length = temporal_length if (temporal or ablate.startswith("temporal")) else 1
        if ablate.startswith("temporal") and self.temporal_length < 2:
            self.temporal_length = 2
        size_prior = np.array([[1.95, 4.4, 1.65]]) if size_prior is None else size_prior
        rng = np.random.default_rng(seed)
        c = self.encoder_cfg.out_channels
        self.encoder = ImageEncoder(self.encoder_cfg, rng, rig.image_size)
        self.fde = FeatureDivergence(c, self.grid.resolution[2], rng, bypass=(ablate == "no-fde"))
        if seg_mode != "only":
            self.decoder = DuoSpaceDecoder(self.decoder_cfg, len(ImageEncoder.strides), self.grid.extent,
                                           size_prior, rng, temporal=self.temporal_decoder)
        if seg_mode != "off":
            self.seg = SegHead(c, rng, self.seg_cfg.width)
        if ablate == "temporal-stacking":
            self.bev_fusion = BevStacking(c, rng)
        elif ablate == "temporal-attn":
            self.bev_fusion = BevGatedAttention(c, rng)

    # -- helpers -------------------------------------------------------------------
    @property
    def space_mode(self) -> str:
        return self.ablate if self.ablate in ("bev-only", "pv-only") else "duo"

    @property
    def needs_bev(self) -> bool:
        return self.seg_mode != "off" or self.space_mode != "pv-only"

    def frame_features(self, images: np.ndarray):
        pyramid = self.encoder(images_to_tensor(images))
        bev = enhance_and_reduce(lift(pyramid, self.rig, self.grid), self.fde) if self.needs_bev else None
        return pyramid, bev

    # -- forward -------------------------------------------------------------------
    def forward(self, frames: Sequence) -> ModelOutput:
        """``frames`` is a chronological list of Frame-like objects; the last one is predicted.

        Only the newest ``temporal_length`` frames are used. Past-frame features
        are computed without gradients.
        """
        frames = list(frames)[-self.temporal_length:]
        pyramid, bev = self.frame_features(frames[-1].images)
        memory = FeatureMemory(self.temporal_length)
        past = []
        with no_grad():
            for fr in frames[:-1]:
                p, b = self.frame_features(fr.images)
                past.append((fr, p.detach(), b.detach() if b is not None else None))
        for fr, p, b in past:
            memory.push(MemoryEntry(p, b, fr.ego_warp_to_prev, fr.timestamp))
        memory.push(MemoryEntry(pyramid, bev, frames[-1].ego_warp_to_prev, frames[-1].timestamp))

        extras = {}
        if self.ablate in ("temporal-stacking", "temporal-attn") and len(past) > 0:
            prev_bev = past[-1][2]
            warped = warp_bev(prev_bev, frames[-1].ego_warp_to_prev)
            bev = BevGrid(bev.extent, bev.resolution, self.bev_fusion(bev.features, warped))
            memory = FeatureMemory(1)
            memory.push(MemoryEntry(pyramid, bev, frames[-1].ego_warp_to_prev, frames[-1].timestamp))

        entries = memory.entries()
        contexts = [SpaceContext(e.bev, e.pyramid, self.rig) for e in entries]
        layers = []
        if self.seg_mode != "only":
            tfn = (lambda poses: temporal_poses(poses, memory)) if self.temporal_decoder else None
            layers = self.decoder(contexts, mode=self.space_mode, temporal_fn=tfn)
        seg = self.seg(bev) if self.seg_mode != "off" else None
        return ModelOutput(layers, seg, bev, pyramid, extras)
