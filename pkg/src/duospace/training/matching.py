"""Bipartite assignment of queries to ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["MatchResult", "match"]


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple          # ((query, gt), ...) sorted by query index
    unmatched: tuple      # query indices without a gt

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=int)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=int)

    def total_cost(self, cost: np.ndarray) -> float:
        return float(sum(cost[q, g] for q, g in self.pairs))


def match(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost injective assignment on a (k, G) cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"match: cost must be 2-d, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("match: cost matrix contains NaN")
    if not np.isfinite(cost).all():
        raise ValueError("match: cost matrix contains inf")
    k, g = cost.shape
    if k == 0 or g == 0:
        return MatchResult((), tuple(range(k)))
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple(sorted((int(r), int(c)) for r, c in zip(rows, cols)))
    used = {r for r, _ in pairs}
    return MatchResult(pairs, tuple(i for i in range(k) if i not in used))
