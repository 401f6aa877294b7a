"""Tensor type and the explicit gradient tape.

A ``GradientTape`` is entered as a context manager; every primitive executed
while it is active (and touching at least one ``requires_grad`` tensor) is
appended to it. ``tape.backward(loss)`` replays the record in reverse.
Tapes live in thread-local storage, so independent tapes on different threads
never share state.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericalError, ShapeError

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextmanager
def precision(bits: int):
    """Switch the default float width (32 for training, 64 for gradient checks)."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    prev = get_dtype()
    _local.dtype = np.dtype(np.float64 if bits == 64 else np.float32)
    try:
        yield
    finally:
        _local.dtype = prev


class Node:
    __slots__ = ("tape", "output", "inputs", "backward_fn", "op")

    def __init__(self, tape, output, inputs, backward_fn, op):
        self.tape = tape
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tensor:
    """Dense array with an optional place on a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_dtype(), copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.tape_node = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    """Return ``x`` if it is a Tensor, otherwise wrap it as a constant."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(get_dtype())
    elif arr.dtype != get_dtype() and arr.ndim == 0:
        arr = arr.astype(get_dtype())
    return Tensor._wrap(arr, False)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    """Create an op output and record it on the active tape when needed."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, req)
    if req:
        tape = current_tape()
        if tape is not None:
            tape._record(out, tuple(inputs), backward_fn, op)
    return out


class GradientTape:
    """Ordered record of executed primitives; single owner per forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("gradient tapes must be exited in LIFO order")
        stack.pop()

    def _record(self, out: Tensor, inputs, backward_fn, op: str) -> None:
        node = Node(self, out, inputs, backward_fn, op)
        out.tape_node = node
        self.nodes.append(node)
        for t in inputs:
            if t.requires_grad and t.tape_node is None:
                self._leaves[id(t)] = t

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise NumericalError("backward called on a non-finite loss")
        if loss.tape_node is None or loss.tape_node.tape is not self:
            if not loss.requires_grad:
                raise RuntimeError("loss does not depend on any requires_grad tensor")
            raise RuntimeError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        stop = self.nodes.index(loss.tape_node)
        for node in reversed(self.nodes[: stop + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.data.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {gi.shape} != input shape {t.data.shape}")
                if t.tape_node is None:
                    gi = gi.astype(t.data.dtype, copy=False)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi

    def reset(self) -> None:
        """Drop every recorded node and clear leaf gradients."""
        for t in self._leaves.values():
            t.grad = None
        for node in self.nodes:
            node.output.tape_node = None
        self.nodes.clear()
        self._leaves.clear()


def backward(loss: Tensor) -> None:
    """Run reverse mode from ``loss`` on the tape that produced it."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_node is None:
        raise RuntimeError("loss was not produced under an active gradient tape")
    loss.tape_node.tape.backward(loss)
