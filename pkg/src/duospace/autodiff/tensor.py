"""Dense tensors with a reverse-mode computation tape.

Every differentiable op appends one :class:`Node` to a process-wide tape when
any of its inputs requires a gradient. :func:`backward` walks that tape in
exact reverse order, accumulates gradients into every tensor that requires
one, and then clears the tape.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "NonFiniteError",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "strict_mode",
    "precision",
    "get_default_dtype",
    "set_default_dtype",
    "tape_length",
    "clear_tape",
    "as_tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class NonFiniteError(FloatingPointError):
    """Raised under strict mode when an op sees NaN or inf."""


class _State(threading.local):
    def __init__(self) -> None:
        self.tape: list[Node] = []
        self.grad_enabled = True
        self.strict = False
        self.dtype = np.dtype(np.float32)


_state = _State()


def get_default_dtype() -> np.dtype:
    return _state.dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _state.dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float dtype (``"float64"`` for grad checks)."""
    previous = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Reject non-finite op inputs while active."""
    previous = _state.strict
    _state.strict = enabled
    try:
        yield
    finally:
        _state.strict = previous


def tape_length() -> int:
    return len(_state.tape)


def clear_tape() -> None:
    _state.tape.clear()


class Node:
    """One recorded op: inputs, output, and the rule mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "index")

    def __init__(self, op: str, inputs: Sequence["Tensor"], output: "Tensor",
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.index = -1

    def __repr__(self) -> str:
        return f"Node({self.op}, #{self.index})"


class Tensor:
    """An n-dimensional float array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else _state.dtype
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar (implemented in functional) ------------------------
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __radd__(self, other):
        from . import functional as F
        return F.add(other, self)

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    def __rmul__(self, other):
        from . import functional as F
        return F.mul(other, self)

    def __truediv__(self, other):
        from . import functional as F
        return F.div(self, other)

    def __rtruediv__(self, other):
        from . import functional as F
        return F.div(other, self)

    def __neg__(self):
        from . import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __pow__(self, exponent):
        from . import functional as F
        return F.power(self, exponent)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    def sum(self, axis=None, keepdims=False):
        from . import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if dtype is None:
        arr = np.asarray(value)
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _state.dtype
    return Tensor(value, dtype=dtype)


def check_finite(op: str, arrays: Iterable[np.ndarray]) -> None:
    if not _state.strict:
        return
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{op}: non-finite input under strict mode")


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``out_data`` in a tensor and append a tape node if gradients are needed."""
    needs = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = needs
    out.node = None
    out.name = None
    if needs:
        node = Node(op, inputs, out, backward_fn)
        node.index = len(_state.tape)
        _state.tape.append(node)
        out.node = node
    return out


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` and clear the tape.

    Gradients are *accumulated* into ``.grad`` so that several backward calls
    from independent losses sum.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = _state.tape
    if not loss.requires_grad:
        tape.clear()
        return
    if loss.node is None and not tape:
        # a leaf loss
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    start = loss.node.index if loss.node is not None else -1
    try:
        for node in reversed(tape[: start + 1]):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            out = node.output
            out.grad = g if out.grad is None else out.grad + g
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.data.shape:
                    raise ShapeError(
                        f"{node.op}: backward produced grad {gi.shape} for input {inp.data.shape}")
                if inp.node is None:
                    inp.grad = gi.astype(inp.data.dtype, copy=True) if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
        if loss.node is None:
            loss.grad = np.ones_like(loss.data)
    finally:
        tape.clear()
