"""Dense tensors with reverse-mode automatic differentiation.

Every operation applied to a tensor that requires gradients records a
:class:`Node` on its output. :func:`backward` orders the recorded nodes
topologically and applies each node's backward rule exactly once.

Gradients accumulate into ``Tensor.grad`` of leaf tensors until they are
explicitly zeroed, so two losses backpropagated one after the other leave
the sum of their gradients behind.
"""
from __future__ import annotations

import contextlib
import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from egomtl.errors import ContractError

__all__ = [
    "Tensor",
    "Node",
    "Graph",
    "backward",
    "build_graph",
    "no_grad",
    "is_grad_enabled",
    "check_precision",
    "get_default_dtype",
    "unbroadcast",
]

_local = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def check_precision() -> Iterator[None]:
    """Create new tensors in 64-bit precision (for finite-difference checks)."""
    prev = get_default_dtype()
    _local.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _local.dtype = prev


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """One executed operation: its inputs, its output and its backward rule."""

    __slots__ = ("op", "inputs", "_output", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], output: "Tensor", backward_fn: BackwardFn):
        self.op = op
        self.inputs = inputs
        self._output = weakref.ref(output)
        self.backward_fn = backward_fn

    @property
    def output(self) -> Optional["Tensor"]:
        return self._output()

    def __repr__(self) -> str:
        return f"Node({self.op}, inputs={[t.shape for t in self.inputs]})"


class Tensor:
    """An n-dimensional float array that can take part in a differentiation graph."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        dtype = get_default_dtype()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, inputs: tuple["Tensor", ...], backward_fn: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out._grad = None
        out._node = None
        out.requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        if out.requires_grad:
            out._node = Node(op, inputs, out, backward_fn)
        return out

    # -- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    @property
    def node(self) -> Optional[Node]:
        return self._node

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = None if value is None else np.asarray(value, dtype=self.data.dtype).reshape(self.shape)

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data.astype(dtype)
        out.requires_grad = self.requires_grad
        out.name = self.name
        out._grad = None
        out._node = None
        return out

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- arithmetic sugar (implemented in egomtl.ops) ----------------------
    def __add__(self, other):
        from egomtl import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from egomtl import ops
        return ops.add(self, ops.neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        from egomtl import ops
        return ops.add(ops.neg(self), other)

    def __neg__(self):
        from egomtl import ops
        return ops.neg(self)

    def __mul__(self, other):
        from egomtl import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        if np.ndim(other) == 0:
            return ops.scalar_mul(self, float(other))
        return ops.mul(self, Tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        from egomtl import ops
        if np.ndim(other) != 0 or isinstance(other, Tensor):
            raise TypeError("only division by a Python scalar is supported")
        return ops.scalar_mul(self, 1.0 / float(other))

    def sum(self, axis=None):
        from egomtl import ops
        return ops.sum(self, axis)

    def mean(self, axis=None):
        from egomtl import ops
        return ops.mean(self, axis)

    def reshape(self, *shape):
        from egomtl import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


@dataclass
class Graph:
    """Recorded operations reachable from an output, inputs before consumers."""

    nodes: list[Node] = field(default_factory=list)
    tensors: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.nodes)


def build_graph(root: Tensor) -> Graph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t._node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t._node.inputs:
            if inp._node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return Graph(nodes=[t._node for t in order], tensors=order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._node is None:
        loss.grad = loss.grad + 1.0
        return
    graph = build_graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(graph.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        in_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                if inp._grad is None:
                    inp._grad = np.array(gi, dtype=inp.data.dtype).reshape(inp.shape)
                else:
                    inp._grad += gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
