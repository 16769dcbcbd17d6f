"""Dense real tensors on a taped computation graph.

The design follows one rule: backward passes are written in terms of the
same primitive operations that built the forward pass.  When a gradient is
requested with ``create_graph=True`` the operations that compute it land on
the active tape like any other op, so a second backward pass differentiates
through the first.  Differentiating through a chain of SGD updates therefore
needs no machinery beyond plain reverse mode over the unrolled tape.

Primitives live in :mod:`textdistill.ops`; this module holds the data
structures (``Tensor``, ``Node``, ``Graph``), the recording state, and the
default-dtype switch.  Computation runs in float32 by default; correctness
suites run the identical code paths in float64 via :func:`using_dtype`.
"""

from __future__ import annotations

import contextlib

import numpy as np

RECORDING = "recording"
FROZEN = "frozen"

_default_dtype = np.float32


class ShapeMismatch(ValueError):
    """Operand shapes do not satisfy the operation's contract."""


class NonFiniteResult(ArithmeticError):
    """An operation produced NaN or Inf."""


class NotScalar(ValueError):
    """backward() was asked to start from a non-scalar tensor."""


class DetachedTensor(RuntimeError):
    """A tensor involved in backward() is not on the graph in question."""


class FilterTooLong(ValueError):
    """Convolution filter is longer than the input sequence."""


class EmptyTime(ValueError):
    """Pooling over an empty time axis."""


class LabelOutOfRange(ValueError):
    """A class label falls outside [0, num_classes)."""


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors are created with (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TypeError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (used by the 64-bit test suites)."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    """A dense n-dimensional real array, optionally tracked on a tape.

    ``data`` is treated as immutable while any tape referencing this tensor
    is alive; code that updates values between steps should build a fresh
    Tensor from the new array instead of writing in place.
    """

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _default_dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            raise TypeError("Tensor holds real values only")
        if arr.size == 0:
            raise ValueError("Tensor dimensions must be positive")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteResult("Tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path: no copy, finiteness already checked by the op runner.
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """A defensive copy of the values."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        """The same values as a constant off the graph (shares storage)."""
        return Tensor._wrap(self.data)

    def __repr__(self):
        if self.data.size <= 8:
            body = np.array2string(self.data, precision=6)
        else:
            body = f"shape={self.shape}"
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({body}{flags})"

    # Arithmetic operators are attached by textdistill.ops at import time.


class Node:
    """One record on the tape: an op, its operands, and its stored output.

    ``input_ids`` aligns with ``inputs``; an entry is None when that operand
    is a constant (not tracked on this graph).  ``vjp`` is None for leaves.
    """

    __slots__ = ("id", "op", "graph", "inputs", "input_ids", "output", "ctx", "vjp", "fwd")

    def __init__(self, nid, op, graph, inputs, input_ids, output, ctx, vjp, fwd):
        self.id = nid
        self.op = op
        self.graph = graph
        self.inputs = inputs
        self.input_ids = input_ids
        self.output = output
        self.ctx = ctx
        self.vjp = vjp
        self.fwd = fwd

    @property
    def value(self) -> np.ndarray:
        return self.output.data


class Graph:
    """Append-only tape of op records; acyclic because inputs precede outputs."""

    __slots__ = ("nodes", "mode")

    def __init__(self):
        self.nodes: list[Node] = []
        self.mode = RECORDING

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, input_ids, output, vjp, fwd, ctx) -> Node:
        if self.mode != RECORDING:
            raise RuntimeError("cannot append to a frozen graph")
        node = Node(len(self.nodes), op, self, inputs, input_ids, output, ctx, vjp, fwd)
        self.nodes.append(node)
        return node

    def _append_leaf(self, tensor: Tensor) -> Node:
        return self._append("leaf", (), (), tensor, None, None, {})

    def freeze(self) -> None:
        self.mode = FROZEN

    def replay(self) -> bool:
        """Re-execute every forward record from the leaves.

        Returns True when every recomputed activation is bitwise identical
        to the stored one.
        """
        vals: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node.vjp is None:
                vals[node.id] = node.value
                continue
            args = [
                vals[nid] if nid is not None else t.data
                for t, nid in zip(node.inputs, node.input_ids)
            ]
            out = node.fwd(args, node.ctx)
            if out.dtype != node.value.dtype or not np.array_equal(out, node.value):
                return False
            vals[node.id] = out
        return True


_active_graph: Graph | None = None
_pause_depth = 0


def active_graph() -> Graph | None:
    """The graph currently recording, or None."""
    if _pause_depth:
        return None
    return _active_graph


@contextlib.contextmanager
def tape():
    """Open a fresh recording graph; frozen when the block exits.

    One tape at a time: a run of training or distillation is a single
    logical thread of graph mutation.
    """
    global _active_graph
    if _active_graph is not None and _active_graph.mode == RECORDING:
        raise RuntimeError("a tape is already recording")
    graph = Graph()
    prev = _active_graph
    _active_graph = graph
    try:
        yield graph
    finally:
        graph.freeze()
        _active_graph = prev


@contextlib.contextmanager
def paused():
    """Suspend recording (used by backward when create_graph is False)."""
    global _pause_depth
    _pause_depth += 1
    try:
        yield
    finally:
        _pause_depth -= 1


def tracked_id(t: Tensor, graph: Graph) -> int | None:
    """The tensor's node id on ``graph``, or None if it is not on it."""
    node = t.node
    if node is not None and node.graph is graph:
        return node.id
    return None


def _ensure_tracked(t: Tensor, graph: Graph) -> int | None:
    """Register a requires_grad tensor as a leaf on first use in a graph."""
    nid = tracked_id(t, graph)
    if nid is None and t.requires_grad:
        node = graph._append_leaf(t)
        t.node = node
        nid = node.id
    return nid
