"""Convolution, pooling and loss built from twice-differentiable pieces."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import StructuralError
from . import ops
from .core import Node, as_node, result


def _out_size(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def im2col(x: Node, kh: int, kw: int, stride: int = 1) -> Node:
    """(B, C, H, W) -> (B, C*kh*kw, H'*W') patch matrix, channel-major."""
    b, c, h, w = x.shape
    if kh > h or kw > w:
        raise StructuralError(f"kernel {(kh, kw)} larger than input {(h, w)}")
    ho, wo = _out_size(h, kh, stride), _out_size(w, kw, stride)
    win = sliding_window_view(x.value, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    value = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)
    shape = x.shape

    def vjp(g, node, needs):
        return (col2im(g, shape, kh, kw, stride),)

    return result(value, (x,), vjp, "im2col")


def col2im(cols: Node, shape: tuple, kh: int, kw: int, stride: int = 1) -> Node:
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    b, c, h, w = shape
    ho, wo = _out_size(h, kh, stride), _out_size(w, kw, stride)
    src = cols.value.reshape(b, c, kh, kw, ho, wo)
    value = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            value[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += src[:, :, i, j]

    def vjp(g, node, needs):
        return (im2col(g, kh, kw, stride),)

    return result(value, (cols,), vjp, "col2im")


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation (no kernel flip) plus per-channel bias."""
    x, kernel = as_node(x), as_node(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise StructuralError("conv2d expects (B,C,H,W) input and (O,C,kh,kw) kernel")
    if stride < 1 or padding < 0:
        raise StructuralError("stride must be >= 1 and padding >= 0")
    bsz, cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise StructuralError(f"kernel expects {kcin} input channels, input has {cin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise StructuralError("kernel larger than padded input")
    ho = _out_size(h + 2 * padding, kh, stride)
    wo = _out_size(w + 2 * padding, kw, stride)
    cols = im2col(ops.pad2d(x, padding, padding, padding, padding), kh, kw, stride)
    out = ops.matmul(ops.reshape(kernel, (cout, cin * kh * kw)), cols)
    out = ops.reshape(out, (bsz, cout, ho, wo))
    if bias is not None:
        bias = as_node(bias)
        if bias.shape != (cout,):
            raise StructuralError(f"bias shape {bias.shape} != ({cout},)")
        out = ops.add(out, ops.reshape(bias, (1, cout, 1, 1)))
    return out


def maxpool2(x) -> Node:
    """Non-overlapping 2x2 max over the last two axes.

    Ties go to the first element of the window in row-major order.
    """
    x = as_node(x)
    if x.ndim < 2:
        raise StructuralError("maxpool2 needs at least 2-D input")
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise StructuralError(f"maxpool2 needs even spatial size, got {(h, w)}")
    lead = tuple(lead)
    win = x.value.reshape(*lead, h // 2, 2, w // 2, 2)
    corners = [win[..., i, :, j] for i, j in ((0, 0), (0, 1), (1, 0), (1, 1))]
    value = np.maximum(np.maximum(corners[0], corners[1]), np.maximum(corners[2], corners[3]))
    mask = np.zeros(win.shape, dtype=x.dtype)
    taken = np.zeros(value.shape, dtype=bool)
    for (i, j), corner in zip(((0, 0), (0, 1), (1, 0), (1, 1)), corners):
        hit = (corner == value) & ~taken
        mask[..., i, :, j] = hit
        taken |= hit
    mask = Node(mask.reshape(x.shape))
    up_shape = (*lead, h // 2, 1, w // 2, 1)
    full = (*lead, h // 2, 2, w // 2, 2)

    def vjp(g, node, needs):
        up = ops.reshape(ops.broadcast_to(ops.reshape(g, up_shape), full), (*lead, h, w))
        return (ops.mul(up, mask),)

    return result(value, (x,), vjp, "maxpool2")


def softmax_cross_entropy(logits, targets) -> Node:
    """Mean over the batch of ``-log softmax(logits)[target]``."""
    logits = as_node(logits)
    if logits.ndim != 2:
        raise StructuralError(f"logits must be (B, K), got {logits.shape}")
    bsz, k = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (bsz,):
        raise StructuralError(f"need {bsz} targets, got shape {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer) or targets.min(initial=0) < 0 or targets.max(initial=0) >= k:
        raise StructuralError(f"targets must be class indices in [0, {k})")
    onehot = np.zeros((bsz, k), dtype=logits.dtype)
    onehot[np.arange(bsz), targets] = 1
    shift = Node(logits.value.max(axis=1, keepdims=True))
    z = ops.sub(logits, shift)
    lse = ops.log(ops.sum(ops.exp(z), axis=1))
    picked = ops.sum(ops.mul(z, Node(onehot)), axis=1)
    return ops.mean(ops.sub(lse, picked))
