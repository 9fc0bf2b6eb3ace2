"""Tensor type, computation graph and reverse-mode backward pass."""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()
_seq = itertools.count()


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def get_precision() -> str:
    return getattr(_state, "precision", "float32")


def get_dtype() -> type:
    return _DTYPES[get_precision()]


def set_precision(name: str) -> None:
    """Switch the engine-wide floating point precision ("float32" or "float64")."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state.precision = name


@contextlib.contextmanager
def precision(name: str):
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the graph."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class BranchTape:
    """Records the discrete choices of nonsmooth ops (ReLU masks, pooling argmax,
    clamp masks) and replays them, so repeated evaluations stay on one smooth piece."""

    def __init__(self):
        self.items: list[np.ndarray] = []
        self.replaying = False
        self.pos = 0

    def rewind(self) -> None:
        self.replaying = True
        self.pos = 0


@contextlib.contextmanager
def branch_tape(tape: BranchTape):
    previous = getattr(_state, "tape", None)
    _state.tape = tape
    try:
        yield tape
    finally:
        _state.tape = previous


def branch(decide: Callable[[], np.ndarray]) -> np.ndarray:
    """Return ``decide()``, or the recorded decision when a tape is replaying."""
    tape = getattr(_state, "tape", None)
    if tape is None:
        return decide()
    if tape.replaying:
        if tape.pos >= len(tape.items):
            raise RuntimeError("branch tape exhausted: graph differs from the recorded one")
        out = tape.items[tape.pos]
        tape.pos += 1
        return out
    out = decide()
    tape.items.append(out)
    return out


@dataclass(eq=False)
class Node:
    """One executed operation: its inputs, the vector-Jacobian product and an ordinal."""

    op: str
    inputs: tuple["Tensor", ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    """An n-dimensional array with an optional gradient buffer.

    ``data`` is a C-contiguous numpy array in the engine precision. Tensors
    produced by operations on ``requires_grad`` inputs carry the node that
    created them so that :func:`backward` can replay the graph in reverse.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=get_dtype(), order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic is provided by ops; bound here so expressions read naturally.
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
        return ops.mul(self, -1.0)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from . import ops
        return ops.mean(self, axis)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Wrap an op's forward output, attaching a graph node when any input needs grad."""
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), vjp)
    return out


@dataclass
class Graph:
    """Operations reachable from an output, in exact reverse execution order."""

    nodes: list[tuple[Tensor, Node]]

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        seen: set[int] = set()
        found: list[tuple[Tensor, Node]] = []
        stack = [output]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append((t, t.node))
            stack.extend(t.node.inputs)
        found.sort(key=lambda pair: pair[1].seq, reverse=True)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad.

    Gradients add onto existing ``grad`` buffers. Leaves listed in ``leaves``
    that are not connected to ``loss`` get a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if leaves is not None:
        for leaf in leaves:
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    if graph is None:
        graph = Graph.from_output(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    def deliver(t: Tensor, g: np.ndarray) -> None:
        if not t.requires_grad:
            return
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            return
        key = id(t)
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g

    if loss.node is None:
        deliver(loss, grads.pop(id(loss)))
        return
    for out, node in graph.nodes:
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is not None:
                deliver(inp, gi)
