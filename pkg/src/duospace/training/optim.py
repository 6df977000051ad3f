"""Decoupled-weight-decay Adam, cosine learning-rate schedule and global-norm clipping."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

__all__ = ["ParamGroup", "AdamW", "cosine_lr", "clip_grad_norm"]


class ParamGroup:
    def __init__(self, named_params: Sequence, lr: float, name: str = "default"):
        self.named = list(named_params)
        self.lr = float(lr)
        self.name = name


class AdamW:
    def __init__(self, groups: Sequence[ParamGroup], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.groups = list(groups)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for g in self.groups for n, p in g.named}
        self.v = {n: np.zeros_like(p.data) for g in self.groups for n, p in g.named}

    def step(self, lr_scale: float = 1.0) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for g in self.groups:
            lr = g.lr * lr_scale
            for name, p in g.named:
                grad = p.grad
                if grad is None:
                    grad = np.zeros_like(p.data)
                m, v = self.m[name], self.v[name]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                if lr == 0.0:
                    continue
                update = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if self.weight_decay:
                    p.data *= 1.0 - lr * self.weight_decay
                p.data -= (lr * update).astype(p.data.dtype)

    def state_arrays(self) -> dict:
        out = {}
        for n in self.m:
            out[f"m/{n}"] = self.m[n]
            out[f"v/{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for n in self.m:
            self.m[n][...] = arrays[f"m/{n}"]
            self.v[n][...] = arrays[f"v/{n}"]
        self.step_count = int(step_count)


def cosine_lr(step: int, total: int, floor: float = 0.01) -> float:
    """Multiplier going from 1 at step 0 to ``floor`` at ``total``."""
    if total <= 0:
        return 1.0
    frac = min(max(step / total, 0.0), 1.0)
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params: Sequence, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
