"""Parameter containers and the small set of layers the pipeline is built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional, Sequence

import numpy as np

from . import functional as F
from .conv import conv2d, conv3d, conv_transpose2d
from .tensor import Tensor, get_default_dtype

__all__ = [
    "Parameter", "Module", "ModuleList", "Linear", "Conv2d", "Conv3d",
    "ConvTranspose2d", "LayerNorm", "MLP",
]


class Parameter(Tensor):
    """A leaf tensor that the optimizer updates."""

    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    def __init__(self) -> None:
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
            self._modules.pop(key, None)
        elif isinstance(value, Module):
            self._modules[key] = value
            self._params.pop(key, None)
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
        for name, arr in state.items():
            if name not in own:
                continue
            p = own[name]
            arr = np.asarray(arr)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match parameter {p.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        super().__init__()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(np.zeros((d_in, d_out), get_default_dtype()) if zero
                                else _uniform(rng, (d_in, d_out), bound))
        self.bias = Parameter(np.zeros(d_out, get_default_dtype())) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class _ConvBase(Module):
    def __init__(self, weight_shape, fan_in: int, n_bias: int, rng, stride=1, padding=0,
                 bias=True, zero=False):
        super().__init__()
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(np.zeros(weight_shape, get_default_dtype()) if zero
                                else _uniform(rng, weight_shape, bound))
        self.bias = Parameter(np.zeros(n_bias, get_default_dtype())) if bias else None
        self.stride = stride
        self.padding = padding


class Conv2d(_ConvBase):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, bias=True, zero=False):
        super().__init__((c_out, c_in, k, k), c_in * k * k, c_out, rng, stride, padding, bias, zero)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(_ConvBase):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, bias=True, zero=False):
        super().__init__((c_out, c_in, k, k, k), c_in * k ** 3, c_out, rng, stride, padding, bias, zero)

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(_ConvBase):
    def __init__(self, c_in, c_out, k, rng, stride=1, padding=0, bias=True):
        super().__init__((c_in, c_out, k, k), c_in * k * k, c_out, rng, stride, padding, bias)

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    """Layer norm over one axis with a learned per-feature scale and shift."""

    def __init__(self, dim: int, axis: int = -1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim, get_default_dtype()))
        self.beta = Parameter(np.zeros(dim, get_default_dtype()))
        self.axis = axis
        self.eps = eps

    def forward(self, x):
        y = F.layernorm(x, axis=self.axis, eps=self.eps)
        axis = self.axis % x.ndim
        shape = [1] * x.ndim
        shape[axis] = -1
        return y * F.reshape(self.gamma, shape) + F.reshape(self.beta, shape)


class MLP(Module):
    """Stack of linear layers with ReLU between them (not after the last)."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, zero_last: bool = False):
        super().__init__()
        self.layers = ModuleList([
            Linear(a, b, rng, zero=(zero_last and i == len(dims) - 2))
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))])

    def forward(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = F.relu(x)
        return x
