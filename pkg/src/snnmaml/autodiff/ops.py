"""Primitive differentiable operations on :class:`Node`.

Binary elementwise ops broadcast numpy-style (rightmost-aligned, size-1 axes
stretch).  Each vjp is expressed with these same ops so that gradient
sweeps can be recorded and differentiated again.
"""

from __future__ import annotations

import numpy as np

from ..errors import StructuralError
from .core import Node, as_node, result


def _broadcast_shape(a: Node, b: Node) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise StructuralError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _pair(a, b) -> tuple[Node, Node]:
    a, b = as_node(a), as_node(b)
    _broadcast_shape(a, b)
    return a, b


# -- shape plumbing ---------------------------------------------------------

def sum_to(a: Node, shape: tuple) -> Node:
    """Sum a broadcast result back down to ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, d in enumerate(shape) if d == 1 and a.shape[i + lead] != 1)
    value = a.value.sum(axis=axes, keepdims=True)
    if lead:
        value = value.reshape(value.shape[lead:])

    def vjp(g, node, needs):
        return (broadcast_to(g, node.parents[0].shape),)

    return result(value, (a,), vjp, "sum_to")


def broadcast_to(a: Node, shape: tuple) -> Node:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError:
        raise StructuralError(f"cannot broadcast {a.shape} to {shape}") from None

    def vjp(g, node, needs):
        return (sum_to(g, node.parents[0].shape),)

    return result(value, (a,), vjp, "broadcast_to")


def reshape(a: Node, shape) -> Node:
    a = as_node(a)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise StructuralError(f"cannot reshape {a.shape} to {shape}") from None

    def vjp(g, node, needs):
        return (reshape(g, node.parents[0].shape),)

    return result(value, (a,), vjp, "reshape")


def transpose(a: Node, axes=None) -> Node:
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise StructuralError(f"bad permutation {axes} for {a.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def vjp(g, node, needs):
        return (transpose(g, inverse),)

    return result(a.value.transpose(axes), (a,), vjp, "transpose")


def swap_last(a: Node) -> Node:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def index(a: Node, i: int, axis: int = 0) -> Node:
    """Select position ``i`` along ``axis`` (the axis is dropped)."""
    a = as_node(a)
    axis = _check_axis(axis, a.ndim)
    length = a.shape[axis]
    if not -length <= i < length:
        raise StructuralError(f"index {i} out of range for axis of length {length}")
    i %= length

    def vjp(g, node, needs):
        return (embed(g, i, axis, length),)

    return result(np.take(a.value, i, axis=axis), (a,), vjp, "index")


def embed(a: Node, i: int, axis: int, length: int) -> Node:
    """Inverse of :func:`index`: place ``a`` at position ``i`` of a zero array."""
    shape = list(a.shape)
    shape.insert(axis, length)
    value = np.zeros(shape, dtype=a.dtype)
    slicer = [slice(None)] * len(shape)
    slicer[axis] = i
    value[tuple(slicer)] = a.value

    def vjp(g, node, needs):
        return (index(g, i, axis),)

    return result(value, (a,), vjp, "embed")


def stack(nodes, axis: int = 0) -> Node:
    nodes = tuple(as_node(n) for n in nodes)
    if not nodes:
        raise StructuralError("stack needs at least one node")
    try:
        value = np.stack([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise StructuralError(str(exc)) from None
    axis = axis % value.ndim

    def vjp(g, node, needs):
        return tuple(index(g, i, axis) if need else None for i, need in enumerate(needs))

    return result(value, nodes, vjp, "stack")


def pad2d(a: Node, top: int, bottom: int, left: int, right: int) -> Node:
    """Zero-pad the last two axes."""
    if min(top, bottom, left, right) < 0:
        raise StructuralError("negative padding")
    if top == bottom == left == right == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
    value = np.pad(a.value, widths)

    def vjp(g, node, needs):
        h, w = node.parents[0].shape[-2:]
        return (crop2d(g, top, top + h, left, left + w),)

    return result(value, (a,), vjp, "pad2d")


def crop2d(a: Node, h0: int, h1: int, w0: int, w1: int) -> Node:
    """Keep rows ``h0:h1`` and columns ``w0:w1`` of the last two axes."""
    h, w = a.shape[-2:]
    if not (0 <= h0 < h1 <= h and 0 <= w0 < w1 <= w):
        raise StructuralError(f"crop window out of range for spatial shape {(h, w)}")
    if (h0, h1, w0, w1) == (0, h, 0, w):
        return a

    def vjp(g, node, needs):
        return (pad2d(g, h0, h - h1, w0, w - w1),)

    return result(a.value[..., h0:h1, w0:w1], (a,), vjp, "crop2d")


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Node:
    a, b = _pair(a, b)

    def vjp(g, node, needs):
        x, y = node.parents
        return (sum_to(g, x.shape) if needs[0] else None,
                sum_to(g, y.shape) if needs[1] else None)

    return result(a.value + b.value, (a, b), vjp, "add")


def sub(a, b) -> Node:
    a, b = _pair(a, b)

    def vjp(g, node, needs):
        x, y = node.parents
        return (sum_to(g, x.shape) if needs[0] else None,
                sum_to(neg(g), y.shape) if needs[1] else None)

    return result(a.value - b.value, (a, b), vjp, "sub")


def mul(a, b) -> Node:
    a, b = _pair(a, b)

    def vjp(g, node, needs):
        x, y = node.parents
        return (sum_to(mul(g, y), x.shape) if needs[0] else None,
                sum_to(mul(g, x), y.shape) if needs[1] else None)

    return result(a.value * b.value, (a, b), vjp, "mul")


def div(a, b) -> Node:
    """Elementwise quotient; division by zero propagates inf/nan."""
    a, b = _pair(a, b)

    def vjp(g, node, needs):
        x, y = node.parents
        gx = sum_to(div(g, y), x.shape) if needs[0] else None
        gy = sum_to(neg(div(mul(g, x), mul(y, y))), y.shape) if needs[1] else None
        return gx, gy

    with np.errstate(divide="ignore", invalid="ignore"):
        value = a.value / b.value
    return result(value, (a, b), vjp, "div")


def neg(a) -> Node:
    a = as_node(a)

    def vjp(g, node, needs):
        return (neg(g),)

    return result(-a.value, (a,), vjp, "neg")


def scale(a, c: float) -> Node:
    """Multiply by a plain constant."""
    a = as_node(a)
    c = float(c)

    def vjp(g, node, needs):
        return (scale(g, c),)

    return result(a.value * a.dtype.type(c), (a,), vjp, "scale")


def lerp(a, b, c: float) -> Node:
    """``c * a + (1 - c) * b`` for a plain constant ``c`` (one node instead of
    three)."""
    a, b = _pair(a, b)
    c = float(c)
    ct, dt = a.dtype.type(c), a.dtype.type(1.0 - c)

    def vjp(g, node, needs):
        x, y = node.parents
        return (sum_to(scale(g, c), x.shape) if needs[0] else None,
                sum_to(scale(g, 1.0 - c), y.shape) if needs[1] else None)

    return result(a.value * ct + b.value * dt, (a, b), vjp, "lerp")


def sign(a) -> Node:
    """Elementwise sign with sign(0) = 0; its derivative is taken as 0."""
    a = as_node(a)

    def vjp(g, node, needs):
        return (None,)

    return result(np.sign(a.value), (a,), vjp, "sign")


def abs(a) -> Node:  # noqa: A001 - mirrors numpy naming
    a = as_node(a)

    def vjp(g, node, needs):
        return (mul(g, sign(node.parents[0])),)

    return result(np.abs(a.value), (a,), vjp, "abs")


def exp(a) -> Node:
    a = as_node(a)

    def vjp(g, node, needs):
        return (mul(g, node),)

    return result(np.exp(a.value), (a,), vjp, "exp")


def log(a) -> Node:
    a = as_node(a)

    def vjp(g, node, needs):
        return (div(g, node.parents[0]),)

    with np.errstate(divide="ignore", invalid="ignore"):
        value = np.log(a.value)
    return result(value, (a,), vjp, "log")


def clamp_min(a, floor: float) -> Node:
    """``max(a, floor)``; the gradient passes where ``a > floor``."""
    a = as_node(a)
    mask = (a.value > floor).astype(a.dtype)

    def vjp(g, node, needs):
        return (mul(g, Node(mask)),)

    return result(np.maximum(a.value, a.dtype.type(floor)), (a,), vjp, "clamp_min")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "abs": abs,
    "exp": exp, "log": log, "sign": sign, "scale": scale, "clamp_min": clamp_min,
    "lerp": lerp,
}


def elementwise(op_kind: str, a, b=None) -> Node:
    """Dispatch by name; ``b`` is the second operand or the constant for
    ``scale`` / ``clamp_min``."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise StructuralError(f"unknown elementwise op {op_kind!r}") from None
    if op_kind in ("neg", "abs", "exp", "log", "sign"):
        return fn(a)
    if b is None:
        raise StructuralError(f"{op_kind} needs a second operand")
    if op_kind == "lerp":
        return fn(a, *b)
    return fn(a, b)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Node:
    """Matrix product with numpy batching rules (both operands at least 2-D)."""
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2:
        raise StructuralError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise StructuralError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError as exc:
        raise StructuralError(str(exc)) from None

    def vjp(g, node, needs):
        x, y = node.parents
        gx = sum_to(matmul(g, swap_last(y)), x.shape) if needs[0] else None
        gy = sum_to(matmul(swap_last(x), g), y.shape) if needs[1] else None
        return gx, gy

    return result(value, (a, b), vjp, "matmul")


# -- reductions -------------------------------------------------------------

def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise StructuralError(f"axis {axis} invalid for {ndim}-D input")
    return axis % ndim


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(sorted(_check_axis(ax, ndim) for ax in axis))
    if len(set(axes)) != len(axes):
        raise StructuralError(f"repeated axis in {axis}")
    return axes


def _kept_shape(shape: tuple, axes: tuple) -> tuple:
    return tuple(1 if i in axes else d for i, d in enumerate(shape))


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = as_node(a)
    axes = _norm_axes(axis, a.ndim)
    kept = _kept_shape(a.shape, axes)

    def vjp(g, node, needs):
        return (broadcast_to(reshape(g, kept), node.parents[0].shape),)

    return result(a.value.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes], dtype=np.int64)) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / count)


def max(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    """Maximum along one axis (or all); ties route the gradient to the
    first index in row-major order."""
    a = as_node(a)
    if axis is None:
        flat = reshape(a, (-1,))
        return reshape(max(flat, 0), (1,) * a.ndim) if keepdims else max(flat, 0)
    if not isinstance(axis, int):
        axes = _norm_axes(axis, a.ndim)
        if len(axes) != 1:
            raise StructuralError("max reduces over a single axis or all axes")
        axis = axes[0]
    axis = _check_axis(axis, a.ndim)
    if a.shape[axis] == 0:
        raise StructuralError("max over an empty axis")
    value = a.value.max(axis=axis, keepdims=True)
    arg = np.expand_dims(np.argmax(a.value, axis=axis), axis)
    positions = np.arange(a.shape[axis]).reshape([-1 if i == axis else 1 for i in range(a.ndim)])
    mask = (positions == arg).astype(a.dtype)
    kept = value.shape
    if not keepdims:
        value = np.squeeze(value, axis=axis)

    def vjp(g, node, needs):
        return (mul(broadcast_to(reshape(g, kept), mask.shape), Node(mask)),)

    return result(value, (a,), vjp, "max")


def reduce(op_kind: str, a, axes=None) -> Node:
    if op_kind == "sum":
        return sum(a, axes)
    if op_kind == "mean":
        return mean(a, axes)
    if op_kind == "max":
        return max(a, axes)
    raise StructuralError(f"unknown reduction {op_kind!r}")
