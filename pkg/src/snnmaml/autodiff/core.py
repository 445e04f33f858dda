"""Graph nodes, recording state and the reverse sweep.

Every differentiable operation returns a :class:`Node`.  While recording is
active and at least one input requires a gradient, the node keeps references
to its parents and a vector-Jacobian product (``vjp``) closure.  The vjp
closures are themselves written with node operations, so running the reverse
sweep with recording switched on yields gradients that can be differentiated
again.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import StructuralError

_DTYPES = {"f64": np.float64, "float64": np.float64, "f32": np.float32, "float32": np.float32}
_default_dtype = np.float64


class _State(threading.local):
    def __init__(self) -> None:
        self.recording = True
        self.counters: list[GraphStats] = []


_state = _State()


def set_default_dtype(name) -> None:
    """Select the float type for new nodes: ``"f64"`` (default) or ``"f32"``."""
    global _default_dtype
    if isinstance(name, str):
        if name not in _DTYPES:
            raise ValueError(f"unknown precision {name!r}")
        _default_dtype = _DTYPES[name]
    else:
        _default_dtype = np.dtype(name).type


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def default_dtype(name):
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


def is_recording() -> bool:
    return _state.recording


@contextlib.contextmanager
def recording(enabled: bool = True):
    """Switch lineage recording on or off for the current thread."""
    previous = _state.recording
    _state.recording = enabled
    try:
        yield
    finally:
        _state.recording = previous


def no_grad():
    return recording(False)


class GraphStats:
    """Counts nodes created with lineage while the context is open."""

    def __init__(self) -> None:
        self.recorded = 0

    def __enter__(self) -> "GraphStats":
        _state.counters.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.counters.remove(self)


VjpFn = Callable[["Node", "Node", tuple], tuple]


class Node:
    """A dense array that may take part in a differentiation graph."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op")

    __array_priority__ = 100.0

    def __init__(self, value, parents: tuple = (), vjp: VjpFn | None = None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return self.value.item()

    def detach(self) -> "Node":
        return Node(self.value)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.parents else ""
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Node({self.value!r}{grad}{tag})"

    # operator sugar; the implementations live in ops.py
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)


def _ops():
    from . import ops

    return ops


def make_node(shape, values, requires_grad: bool = False, dtype=None) -> Node:
    """Build a leaf node from a flat (or nested) value list and a shape."""
    shape = tuple(int(d) for d in shape)
    arr = np.asarray(values, dtype=dtype or _default_dtype).reshape(-1)
    expected = int(np.prod(shape, dtype=np.int64))
    if arr.size != expected:
        raise StructuralError(f"{arr.size} values cannot fill shape {shape}")
    return Node(arr.reshape(shape), requires_grad=requires_grad)


def tensor(values, requires_grad: bool = False, dtype=None) -> Node:
    """Leaf node from any array-like, keeping its shape."""
    arr = np.array(values, dtype=dtype or _default_dtype)
    return Node(arr, requires_grad=requires_grad)


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=_default_dtype))


def result(value, parents: tuple, vjp: VjpFn, op: str) -> Node:
    """Wrap an op output, attaching lineage only when it is needed."""
    if not isinstance(value, np.ndarray):
        value = np.asarray(value)
    if _state.recording and any(p.requires_grad for p in parents):
        for counter in _state.counters:
            counter.recorded += 1
        return Node(value, parents, vjp, True, op)
    return Node(value)


def _toposort(root: Node, targets: set[int]) -> list[Node]:
    """Post-order of the nodes between ``root`` and any target.

    Nodes that cannot reach a target are left out; they would only receive
    gradients nobody asked for.
    """
    order: list[Node] = []
    reaches: dict[int, bool] = {}
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            hit = key in targets or any(reaches.get(id(p), False) for p in node.parents)
            reaches[key] = hit
            if hit:
                order.append(node)
            continue
        if key in reaches:
            continue
        reaches[key] = False
        stack.append((node, True))
        for parent in reversed(node.parents):
            if parent.requires_grad and id(parent) not in reaches:
                stack.append((parent, False))
    return order


def _ancestors(nodes: Iterable[Node]) -> set[int]:
    seen: set[int] = set()
    stack = list(nodes)
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.extend(node.parents)
    return seen


def backward(loss: Node, wrt, create_graph: bool = False, retain_graph: bool | None = None):
    """Gradients of a scalar ``loss`` with respect to ``wrt``.

    ``wrt`` may be a sequence of nodes (a list is returned) or a mapping of
    names to nodes (a dict with the same keys is returned).  With
    ``create_graph`` the returned gradients carry lineage and can be passed to
    another ``backward`` call.  Unless the graph is retained, intermediate
    nodes lose their lineage afterwards so the forward graph can be freed.
    """
    if loss.shape != ():
        raise StructuralError(f"backward needs a scalar loss, got shape {loss.shape}")
    if retain_graph is None:
        retain_graph = create_graph
    keyed = isinstance(wrt, dict)
    targets: Sequence[Node] = list(wrt.values()) if keyed else list(wrt)
    target_ids = {id(t) for t in targets}

    grads: dict[int, Node] = {}
    if loss.requires_grad:
        order = _toposort(loss, target_ids)
        relevant = {id(n) for n in order}
        grads[id(loss)] = Node(np.ones((), dtype=loss.dtype))
        with recording(create_graph):
            for node in reversed(order):
                key = id(node)
                g = grads.get(key) if key in target_ids else grads.pop(key, None)
                if g is None or not node.parents:
                    continue
                needs = tuple(id(p) in relevant for p in node.parents)
                parent_grads = node.vjp(g, node, needs)
                for parent, pg, need in zip(node.parents, parent_grads, needs):
                    if pg is None or not need:
                        continue
                    pk = id(parent)
                    prev = grads.get(pk)
                    grads[pk] = pg if prev is None else _ops().add(prev, pg)
        if not retain_graph:
            keep = _ancestors(targets)
            for node in order:
                if id(node) not in keep:
                    node.parents = ()
                    node.vjp = None
                    node.requires_grad = False

    out = []
    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = Node(np.zeros(t.shape, dtype=t.dtype))
        elif not create_graph and g.parents:
            g = g.detach()
        if g.shape != t.shape:
            g = Node(np.broadcast_to(g.value, t.shape).copy())
        out.append(g)
    if keyed:
        return dict(zip(wrt.keys(), out))
    return out


def grad(loss: Node, wrt: Node, create_graph: bool = False) -> Node:
    """Single-input convenience wrapper around :func:`backward`."""
    return backward(loss, [wrt], create_graph=create_graph)[0]


def register_custom(forward_fn: Callable, backward_fn: Callable,
                    second_backward_fn: Callable | None = None, name: str = "custom"):
    """Turn numpy callables into a unary differentiable op.

    ``forward_fn(x) -> y``; ``backward_fn(x, g) -> dx`` maps an output
    gradient to an input gradient; ``second_backward_fn(x, g, gg) ->
    (dx, dg)`` is the vjp of ``backward_fn`` itself and is what makes
    gradients of gradients exact.  Without it the op still works for first
    order but refuses to be recorded inside a ``create_graph`` sweep.
    """

    def backward_vjp(gg: Node, node: Node, needs: tuple):
        x, g = node.parents
        dx, dg = second_backward_fn(x.value, g.value, gg.value)
        return (Node(np.asarray(dx, dtype=x.dtype)) if needs[0] else None,
                Node(np.asarray(dg, dtype=g.dtype)) if needs[1] else None)

    def vjp(g: Node, node: Node, needs: tuple):
        (x,) = node.parents
        value = np.asarray(backward_fn(x.value, g.value), dtype=x.dtype)
        if _state.recording and (x.requires_grad or g.requires_grad):
            if second_backward_fn is None:
                raise StructuralError(
                    f"op {name!r} has no second_backward_fn and cannot be "
                    "differentiated twice")
            return (result(value, (x, g), backward_vjp, name + "_backward"),)
        return (Node(value),)

    def op(x) -> Node:
        x = as_node(x)
        value = np.asarray(forward_fn(x.value), dtype=x.dtype)
        return result(value, (x,), vjp, name)

    op.__name__ = name
    return op
