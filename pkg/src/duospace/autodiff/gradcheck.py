"""Central finite-difference checks for every registered differentiable op."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .conv import conv2d, conv3d, conv_transpose2d
from .sampling import grid_sample
from .tensor import Tensor, backward, clear_tape, precision

__all__ = ["OpSpec", "GradCheckReport", "REGISTRY", "register", "grad_check", "run_suite",
           "relative_error", "numeric_grad"]

Sampler = Callable[[np.random.Generator, Sequence[tuple]], list]


@dataclass
class OpSpec:
    name: str
    fn: Callable[..., Tensor]
    shapes: list
    sampler: Optional[Sampler] = None
    # indices of inputs that receive gradients
    wrt: Optional[tuple] = None


@dataclass
class GradCheckReport:
    op: str
    shapes: list
    seed: int
    max_rel_error: float
    per_input: list = field(default_factory=list)
    seconds: float = 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


REGISTRY: dict[str, OpSpec] = {}


def register(name: str, fn, shapes, sampler: Optional[Sampler] = None, wrt=None) -> OpSpec:
    spec = OpSpec(name, fn, [tuple(s) for s in shapes], sampler, wrt)
    REGISTRY[name] = spec
    return spec


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Max over elements of ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(arr.shape)


def _normal(rng, shapes):
    return [rng.standard_normal(s) for s in shapes]


def _away_from_zero(rng, shapes, gap=1e-3):
    arrays = _normal(rng, shapes)
    for a in arrays:
        bad = np.abs(a) < gap
        while bad.any():
            a[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(a) < gap
    return arrays


def _positive(rng, shapes):
    return [rng.uniform(0.5, 2.0, size=s) for s in shapes]


def _distinct_pair(rng, shapes, gap=1e-3):
    a, b = _normal(rng, shapes)
    bad = np.abs(np.broadcast_to(a, np.broadcast_shapes(a.shape, b.shape)) - b) < gap
    while bad.any():
        b = b + bad * 0.1
        bad = np.abs(a - b) < gap
    return [a, b]


def _clamp_inputs(rng, shapes):
    (x,) = _normal(rng, shapes)
    for bound in (-0.5, 0.5):
        near = np.abs(x - bound) < 1e-3
        x[near] += 0.01
    return [x]


def _grid_inputs(rng, shapes):
    fshape, pshape = shapes
    feats = rng.standard_normal(fshape)
    h, w = fshape[2], fshape[3]
    # keep pixel coordinates off texel-centre lines (kinks) and inside the clamp range
    px = rng.integers(0, max(w - 1, 1), size=pshape[:2]) + rng.uniform(0.05, 0.95, size=pshape[:2])
    py = rng.integers(0, max(h - 1, 1), size=pshape[:2]) + rng.uniform(0.05, 0.95, size=pshape[:2])
    pts = np.stack([(px + 0.5) / w, (py + 0.5) / h], axis=-1)
    return [feats, pts]


def _build_registry() -> None:
    register("add", F.add, [(3, 4), (4,)])
    register("sub", F.sub, [(3, 4), (3, 1)])
    register("mul", F.mul, [(2, 3), (2, 3)])
    register("div", F.div, [(2, 3), (2, 3)], sampler=lambda r, s: [r.standard_normal(s[0]), r.uniform(0.5, 2, s[1])])
    register("neg", F.neg, [(5,)])
    register("power", lambda x: F.power(x, 3.0), [(2, 3)])
    register("square", F.square, [(2, 3)])
    register("exp", F.exp, [(2, 3)])
    register("log", F.log, [(2, 3)], sampler=_positive)
    register("sqrt", F.sqrt, [(2, 3)], sampler=_positive)
    register("abs", F.abs, [(2, 3)], sampler=_away_from_zero)
    register("relu", F.relu, [(3, 4)], sampler=_away_from_zero)
    register("gelu", F.gelu, [(3, 4)])
    register("sigmoid", F.sigmoid, [(3, 4)])
    register("log_sigmoid", F.log_sigmoid, [(3, 4)])
    register("tanh", F.tanh, [(3, 4)])
    register("softmax", lambda x: F.softmax(x, axis=-1), [(3, 5)])
    register("softmax_axis0", lambda x: F.softmax(x, axis=0), [(4, 3)])
    register("layernorm", lambda x: F.layernorm(x, axis=-1), [(3, 6)])
    register("layernorm_channels", lambda x: F.layernorm(x, axis=1), [(2, 4, 3, 3)])
    register("matmul", F.matmul, [(3, 4), (4, 2)])
    register("matmul_batched", F.matmul, [(2, 3, 4), (4, 5)])
    register("concat", lambda a, b: F.concat([a, b], axis=1), [(2, 3), (2, 2)])
    register("stack", lambda a, b: F.stack([a, b], axis=0), [(2, 3), (2, 3)])
    register("slice", lambda x: x[1:, ::2], [(3, 5)])
    register("gather", lambda x: x[np.array([0, 2, 2])], [(3, 4)])
    register("reshape", lambda x: F.reshape(x, (6, 2)), [(3, 4)])
    register("transpose", lambda x: F.transpose(x, (2, 0, 1)), [(2, 3, 4)])
    register("sum", lambda x: F.sum(x, axis=1), [(3, 4)])
    register("mean", lambda x: F.mean(x, axis=(0, 2)), [(2, 3, 4)])
    register("maximum", F.maximum, [(3, 4), (3, 4)], sampler=_distinct_pair)
    register("minimum", F.minimum, [(3, 4), (3, 4)], sampler=_distinct_pair)
    register("clamp", lambda x: F.clamp(x, -0.5, 0.5), [(4, 5)], sampler=_clamp_inputs)
    register("broadcast_to", lambda x: F.broadcast_to(x, (3, 4)), [(1, 4)])
    register("upsample_nearest2d", F.upsample_nearest2d, [(1, 2, 3, 2)])
    register("conv2d", lambda x, w, b: conv2d(x, w, b, stride=1, padding=1), [(2, 3, 5, 4), (4, 3, 3, 3), (4,)])
    register("conv2d_stride2", lambda x, w, b: conv2d(x, w, b, stride=2, padding=1),
             [(1, 2, 7, 6), (3, 2, 3, 3), (3,)])
    register("conv3d", lambda x, w, b: conv3d(x, w, b, stride=1, padding=1),
             [(1, 2, 4, 3, 3), (2, 2, 3, 3, 3), (2,)])
    register("conv_transpose2d", lambda x, w, b: conv_transpose2d(x, w, b, stride=2, padding=0),
             [(1, 3, 3, 2), (3, 2, 2, 2), (2,)])
    register("grid_sample", grid_sample, [(2, 3, 4, 5), (2, 6, 2)], sampler=_grid_inputs)


_build_registry()


def grad_check(op_name: str, input_shapes=None, seed: int = 0, eps: float = 1e-5,
               max_elements: int = 256) -> GradCheckReport:
    """Compare analytic and central-difference gradients of a registered op in float64."""
    if op_name not in REGISTRY:
        raise KeyError(f"grad_check: unregistered op {op_name!r}")
    spec = REGISTRY[op_name]
    shapes = [tuple(s) for s in (input_shapes or spec.shapes)]
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    with precision("float64"):
        arrays = [np.asarray(a, dtype=np.float64) for a in (spec.sampler or _normal)(rng, shapes)]
        wrt = spec.wrt if spec.wrt is not None else tuple(range(len(arrays)))
        clear_tape()
        probe = spec.fn(*[Tensor(a) for a in arrays])
        weights = rng.standard_normal(probe.shape)

        def loss_value() -> float:
            out = spec.fn(*[Tensor(a) for a in arrays])
            return float(np.sum(out.data * weights))

        tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
        out = spec.fn(*tensors)
        loss = F.sum(F.mul(out, Tensor(weights)))
        backward(loss)
        per_input = []
        for i in wrt:
            analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(arrays[i])
            n = arrays[i].size
            idx = None
            if n > max_elements:
                idx = rng.choice(n, size=max_elements, replace=False)
            numeric = numeric_grad(loss_value, arrays[i], eps, idx)
            if idx is not None:
                err = relative_error(analytic.reshape(-1)[idx], numeric.reshape(-1)[idx])
            else:
                err = relative_error(analytic, numeric)
            per_input.append(err)
    return GradCheckReport(op_name, [list(s) for s in shapes], seed, max(per_input, default=0.0),
                           per_input, time.perf_counter() - t0)


def run_suite(seed: int = 0, names: Optional[Sequence[str]] = None) -> list[GradCheckReport]:
    return [grad_check(n, seed=seed) for n in (names or list(REGISTRY))]
