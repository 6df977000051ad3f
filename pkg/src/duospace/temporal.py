"""Feature memory over past frames and constant-velocity pose rollback."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .encoder import FeaturePyramid
from .geometry import EgoWarp, compose_warps, motion_compensate_array
from .lifting import BevGrid

__all__ = ["MemoryEntry", "FeatureMemory", "temporal_poses"]


@dataclass
class MemoryEntry:
    pyramid: Optional[FeaturePyramid]
    bev: Optional[BevGrid]
    warp_to_prev: EgoWarp   # this frame's ego -> previous frame's ego
    timestamp: float


class FeatureMemory:
    """Ring buffer of the last ``length`` frames, newest first when read."""

    def __init__(self, length: int = 2):
        if length < 1:
            raise ValueError("memory length must be >= 1")
        self.length = length
        self._entries: deque = deque(maxlen=length)

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        self._entries.clear()

    def push(self, entry: MemoryEntry) -> None:
        if self._entries and entry.timestamp <= self._entries[-1].timestamp:
            raise ValueError("memory timestamps must be strictly increasing")
        self._entries.append(entry)

    def entries(self) -> list:
        """Entries ordered newest (index 0) to oldest."""
        return list(reversed(self._entries))

    def step_warps(self) -> list:
        """``(warp, dt)`` for each retained step, newest step first."""
        ents = self.entries()
        return [(ents[j].warp_to_prev, ents[j].timestamp - ents[j + 1].timestamp)
                for j in range(len(ents) - 1)]

    def warp_to_oldest(self) -> EgoWarp:
        """Composite warp from the newest retained frame to the oldest retained frame."""
        total = EgoWarp.identity()
        for warp, _ in self.step_warps():
            total = compose_warps(warp, total)
        return total


def temporal_poses(poses: np.ndarray, memory: FeatureMemory) -> list:
    """Index 0 is ``poses``; index ``j`` is rolled back ``j`` steps through the stored warps.

    An empty memory degrades to the single-frame list ``[poses]``.
    """
    poses = np.asarray(poses, dtype=np.float64)
    out = [poses]
    for warp, dt in memory.step_warps():
        out.append(motion_compensate_array(out[-1], warp, dt))
    return out
