"""
Dense tensors and the dynamic reverse-mode tape

Every op that touches a tensor with ``requires_grad`` appends a node to the
calling thread's Graph. ``backward`` walks the nodes once, newest first,
summing gradients over all consumers, and then resets the tape.

Floats are 64-bit throughout. FLOAT_DTYPE is the single switch point for a
32-bit build; gradient-check tolerances would need loosening with it.
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Iterator, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from utils.errors import UsageError

FLOAT_DTYPE = np.float64

_tensor_ids = itertools.count()
_local = threading.local()


class Tensor:
    """Row-major float64 array with an optional gradient slot"""

    __slots__ = ("tid", "data", "requires_grad", "grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        self.tid = next(_tensor_ids)
        self.data = np.asarray(data, dtype=FLOAT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    # Operator sugar; the ops module owns the implementations
    def __add__(self, other: Any) -> "Tensor":
        from numcore import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from numcore import ops
        return ops.sub(self, other)

    def __mul__(self, other: Any) -> "Tensor":
        from numcore import ops
        if np.isscalar(other):
            return ops.scalar_mul(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        from numcore import ops
        return ops.scalar_mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from numcore import ops
        return ops.matmul(self, other)


@dataclass
class Node:
    """One recorded op: kind, its inputs, its output and the backward closure"""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered op records; insertion order is a valid topological order"""

    nodes: list[Node] = field(default_factory=list)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


def current_graph() -> Graph:
    graph = getattr(_local, "graph", None)
    if graph is None:
        graph = _local.graph = Graph()
    return graph


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in this thread (inference, finite differences)"""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class GradientMap(Mapping[int, Tensor]):
    """Leaf gradients keyed by tensor id; also indexable by the tensor itself"""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = grads

    def __getitem__(self, key: int | Tensor) -> Tensor:
        tid = key.tid if isinstance(key, Tensor) else key
        return self._grads[tid]

    def __contains__(self, key: object) -> bool:
        tid = key.tid if isinstance(key, Tensor) else key
        return tid in self._grads

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def __len__(self) -> int:
        return len(self._grads)


def backward(loss: Tensor) -> GradientMap:
    """Reverse pass from a scalar loss; fills ``.grad`` on every leaf and resets the tape"""
    graph = current_graph()
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not graph.nodes:
        raise UsageError("backward() called on a loss with no recorded graph")

    grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
    produced = {node.output.tid for node in graph.nodes}
    leaves = {
        t.tid: t
        for node in graph.nodes
        for t in node.inputs
        if t.requires_grad and t.tid not in produced
    }

    for node in reversed(graph.nodes):
        g = grads.pop(node.output.tid, None)
        if g is None:
            continue
        for tensor, g_in in zip(node.inputs, node.backward(g)):
            if g_in is None or not tensor.requires_grad:
                continue
            prev = grads.get(tensor.tid)
            grads[tensor.tid] = g_in if prev is None else prev + g_in

    result: dict[int, Tensor] = {}
    for tid, leaf in leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g
        result[tid] = Tensor(g)
    graph.reset()
    return GradientMap(result)
