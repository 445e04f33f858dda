"""Reverse-mode automatic differentiation over numpy arrays, with support for
differentiating through gradients."""

from .core import (
    GraphStats,
    Node,
    as_node,
    backward,
    default_dtype,
    get_default_dtype,
    grad,
    is_recording,
    make_node,
    no_grad,
    recording,
    register_custom,
    set_default_dtype,
    tensor,
)
from .nn import col2im, conv2d, im2col, maxpool2, softmax_cross_entropy
from .ops import (
    abs,
    add,
    broadcast_to,
    clamp_min,
    crop2d,
    div,
    elementwise,
    embed,
    exp,
    index,
    lerp,
    log,
    matmul,
    max,
    mean,
    mul,
    neg,
    pad2d,
    reduce,
    reshape,
    scale,
    sign,
    stack,
    sub,
    sum,
    sum_to,
    swap_last,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
