"""Recorded computation graphs over float64 numpy arrays.

A :class:`Graph` is an append-only list of nodes. Every operation whose
inputs live on a graph appends one node holding a backward closure, so the
list is topologically ordered by construction and :func:`backward` simply
walks it in reverse.  Tensors without a graph are plain constants: ops on
them compute values and record nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

MAX_RANK = 4

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    pass


def check_shape(shape: tuple) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds maximum rank {MAX_RANK}: {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    return shape


@dataclass
class Node:
    tag: str
    inputs: tuple  # node indices, None for constant inputs
    shape: tuple
    backward: Optional[BackwardFn] = None


@dataclass(eq=False)
class Graph:
    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)  # node index -> Tensor

    def leaf(self, data, name: Optional[str] = None) -> "Tensor":
        data = np.array(data, dtype=np.float64)
        idx = len(self.nodes)
        self.nodes.append(Node("leaf", (), check_shape(data.shape)))
        t = Tensor(data, graph=self, node=idx, name=name)
        self.leaves[idx] = t
        return t

    def params(self, store) -> dict:
        """Wrap every array of a parameter mapping as a named leaf."""
        return {name: self.leaf(store[name], name=name) for name in sorted(store)}

    def record(self, tag: str, inputs: Sequence["Tensor"], data: np.ndarray,
               backward: BackwardFn) -> "Tensor":
        idx = len(self.nodes)
        handles = tuple(t.node if t.graph is self else None for t in inputs)
        self.nodes.append(Node(tag, handles, check_shape(data.shape), backward))
        return Tensor(data, graph=self, node=idx)


class Tensor:
    """An n-dimensional float64 array, optionally attached to a graph node.

    Identity semantics: tensors hash by object identity so that gradient
    maps can be keyed by the leaf tensors themselves.
    """

    __slots__ = ("data", "graph", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, graph: Optional[Graph] = None, node: Optional[int] = None,
                 name: Optional[str] = None):
        data = np.asarray(data, dtype=np.float64)
        check_shape(data.shape)
        self.data = data
        self.graph = graph
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    # Operator sugar; the ops module is imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.negate(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def graph_of(*tensors: Tensor) -> Optional[Graph]:
    graphs = {id(t.graph): t.graph for t in tensors if t.graph is not None}
    if len(graphs) > 1:
        raise GraphError("operands belong to different graphs")
    return next(iter(graphs.values()), None)


def backward(graph: Graph, root: Tensor) -> dict:
    """Reverse-mode sweep from a scalar root.

    Returns a map from every leaf tensor of ``graph`` to its gradient;
    leaves the root does not depend on get zeros.
    """
    if root.graph is not graph:
        raise GraphError("root tensor does not belong to this graph")
    if root.ndim != 0:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")

    grads: dict = {root.node: np.ones((), dtype=np.float64)}
    for idx in range(root.node, -1, -1):
        g = grads.get(idx)
        node = graph.nodes[idx]
        if g is None or node.backward is None:
            continue
        # non-leaf slots are consumed exactly once; free them as we go
        del grads[idx]
        for handle, gin in zip(node.inputs, node.backward(g)):
            if handle is None or gin is None:
                continue
            if handle in grads:
                grads[handle] = grads[handle] + gin
            else:
                grads[handle] = gin

    out = {}
    for idx, leaf in graph.leaves.items():
        g = grads.get(idx)
        out[leaf] = np.zeros(leaf.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return out
