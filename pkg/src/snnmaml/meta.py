"""MAML: inner SGD adaptation, the summed query objective, second- and
first-order meta-gradients, ADAM on the initialisation, gated updates and
update-magnitude statistics.

A loss function here is any callable ``loss_fn(params, x, y) -> Node``
returning a scalar; ``params`` maps parameter keys ("layer.weight") to
Nodes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import NumericalError, StructuralError

MODES = ("second-order", "first-order")


def layer_of(key: str) -> str:
    return key.rsplit(".", 1)[0]


@dataclass(frozen=True)
class MetaHyper:
    inner_lr: float = 0.1
    outer_lr: float = 1e-3
    inner_steps: int = 1
    tasks_per_meta_batch: int = 8
    mode: str = "second-order"
    # gate on |proposed update|: a fixed threshold, or a fraction of the
    # per-step range of proposed magnitudes; neither means ungated
    update_threshold: float | None = None
    threshold_fraction: float | None = None
    freeze_set: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "freeze_set", frozenset(self.freeze_set))
        self.validate()

    def validate(self) -> None:
        if not self.inner_lr >= 0:
            raise StructuralError("inner_lr must be non-negative")
        if not self.outer_lr > 0:
            raise StructuralError("outer_lr must be positive")
        if self.inner_steps < 0:
            raise StructuralError("inner_steps must be >= 0")
        if self.tasks_per_meta_batch < 1:
            raise StructuralError("tasks_per_meta_batch must be >= 1")
        if self.mode not in MODES:
            raise StructuralError(f"mode must be one of {MODES}")
        if self.update_threshold is not None and not self.update_threshold >= 0:
            raise StructuralError("update_threshold must be >= 0")
        if self.threshold_fraction is not None and not 0 <= self.threshold_fraction <= 1:
            raise StructuralError("threshold_fraction must lie in [0, 1]")

    @property
    def second_order(self) -> bool:
        return self.mode == "second-order"

    @property
    def gated(self) -> bool:
        return self.update_threshold is not None or self.threshold_fraction is not None


def _check_shapes(params, grads) -> None:
    for key, g in grads.items():
        if key not in params:
            raise StructuralError(f"gradient for unknown parameter {key!r}")
        if tuple(g.shape) != tuple(params[key].shape):
            raise StructuralError(f"gradient {key} has shape {g.shape}, parameter {params[key].shape}")


def sgd_update(params: dict, grads: dict, lr: float, masks: dict | None = None) -> dict:
    """theta - lr * g as graph operations; keys absent from ``grads`` are
    carried over.  ``masks`` (0/1 arrays) zero out gated entries."""
    _check_shapes(params, grads)
    out = dict(params)
    for key, g in grads.items():
        step = ad.scale(g, lr)
        if masks is not None:
            step = ad.mul(step, Node(masks[key]))
        out[key] = ad.sub(params[key], step)
    return out


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p.value) for k, p in params.items()},
                   {k: np.zeros_like(p.value) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()}, self.t, self.b1, self.b2, self.eps)


def adam_update(params: dict, grads: dict, state: AdamState, lr: float):
    """Bias-corrected ADAM step on plain values; returns fresh trainable
    leaves and a new state."""
    for key, p in params.items():
        if key not in state.m or state.m[key].shape != p.shape:
            raise StructuralError(f"ADAM state does not match parameter {key!r}")
    _check_shapes(params, grads)
    new = state.copy()
    new.t += 1
    out = {}
    for key, p in params.items():
        g = grads[key].value if isinstance(grads.get(key), Node) else grads.get(key)
        if g is None:
            out[key] = p.detach()
            out[key].requires_grad = True
            continue
        new.m[key] = new.b1 * new.m[key] + (1 - new.b1) * g
        new.v[key] = new.b2 * new.v[key] + (1 - new.b2) * g * g
        m_hat = new.m[key] / (1 - new.b1 ** new.t)
        v_hat = new.v[key] / (1 - new.b2 ** new.t)
        out[key] = Node(p.value - lr * m_hat / (np.sqrt(v_hat) + new.eps), requires_grad=True)
    return out, new


def _finite(loss: Node, what: str) -> None:
    if not np.isfinite(loss.value).all():
        raise NumericalError(f"non-finite {what} loss")


def gate_masks(steps: dict, threshold: float) -> dict:
    """1 where |proposed update| >= threshold, else 0."""
    return {k: (np.abs(v) >= threshold).astype(v.dtype) for k, v in steps.items()}


def range_threshold(steps: dict, fraction: float) -> float:
    """``fraction`` of the range of proposed update magnitudes."""
    mags = np.concatenate([np.abs(v).ravel() for v in steps.values()])
    if mags.size == 0:
        return 0.0
    return float(fraction * (mags.max() - mags.min()))


def _adapt(params, support, hyper: MetaHyper, loss_fn, record: bool, gated: bool):
    x, y = support
    if len(y) == 0:
        raise StructuralError("empty support set")
    trainable = [k for k in params if layer_of(k) not in hyper.freeze_set]
    theta = dict(params)
    for _ in range(hyper.inner_steps):
        if not trainable:
            break
        loss = loss_fn(theta, x, y)
        _finite(loss, "inner")
        grads = ad.backward(loss, {k: theta[k] for k in trainable}, create_graph=record)
        masks = None
        if gated:
            steps = {k: hyper.inner_lr * g.value for k, g in grads.items()}
            if hyper.update_threshold is not None:
                threshold = hyper.update_threshold
            else:
                threshold = range_threshold(steps, hyper.threshold_fraction)
            masks = gate_masks(steps, threshold)
        theta = sgd_update(theta, grads, hyper.inner_lr, masks)
    return theta


def inner_adapt(params, support, hyper: MetaHyper, loss_fn: Callable,
                record_second_order: bool | None = None) -> dict:
    """``inner_steps`` SGD steps on the support loss, skipping frozen layers.

    With ``record_second_order`` (default: the hyper's mode) the result stays
    twice differentiable with respect to ``params``; otherwise the inner
    gradients are constants.
    """
    record = hyper.second_order if record_second_order is None else record_second_order
    return _adapt(params, support, hyper, loss_fn, record, gated=False)


def thresholded_inner_adapt(params, support, hyper: MetaHyper, loss_fn: Callable,
                            record_second_order: bool | None = None) -> dict:
    """As :func:`inner_adapt`, but entries whose proposed |update| falls
    below the gate keep their previous value.  Without an explicit
    ``update_threshold`` the gate is ``threshold_fraction`` (default 5%) of
    the range of the step's proposed magnitudes."""
    if hyper.update_threshold is None and hyper.threshold_fraction is None:
        hyper = replace(hyper, threshold_fraction=0.05)
    record = hyper.second_order if record_second_order is None else record_second_order
    return _adapt(params, support, hyper, loss_fn, record, gated=True)


def adapt(params, support, hyper: MetaHyper, loss_fn: Callable, record_second_order: bool | None = None):
    """Gated or plain inner adaptation, as configured."""
    fn = thresholded_inner_adapt if hyper.gated else inner_adapt
    return fn(params, support, hyper, loss_fn, record_second_order)


def _episode_parts(episode):
    if hasattr(episode, "support_x"):
        return (episode.support_x, episode.support_y), (episode.query_x, episode.query_y)
    return episode


def episode_loss(params, episode, hyper: MetaHyper, loss_fn: Callable) -> Node:
    """Query loss after adapting on the support set."""
    support, query = _episode_parts(episode)
    adapted = adapt(params, support, hyper, loss_fn)
    loss = loss_fn(adapted, *query)
    _finite(loss, "query")
    return loss


def outer_loss(params, episodes, hyper: MetaHyper, loss_fn: Callable) -> Node:
    """Sum over episodes of the adapted query loss, as one graph."""
    episodes = list(episodes)
    if not episodes:
        raise StructuralError("empty task batch")
    total = None
    for ep in episodes:
        loss = episode_loss(params, ep, hyper, loss_fn)
        total = loss if total is None else ad.add(total, loss)
    return total


class MetaGrad(NamedTuple):
    grads: dict  # key -> ndarray
    loss: float


def meta_gradient(params, episodes, hyper: MetaHyper, loss_fn: Callable) -> MetaGrad:
    """Gradient of :func:`outer_loss` with respect to ``params``.

    Episodes are differentiated one at a time and summed in order, which
    equals differentiating the summed graph while holding one episode's
    graph in memory at a time.
    """
    episodes = list(episodes)
    if not episodes:
        raise StructuralError("empty task batch")
    total = {k: np.zeros_like(p.value) for k, p in params.items()}
    loss_sum = 0.0
    for ep in episodes:
        loss = episode_loss(params, ep, hyper, loss_fn)
        grads = ad.backward(loss, params)
        for k in total:
            total[k] += grads[k].value
        loss_sum += loss.item()
    return MetaGrad(total, loss_sum)


class MetaStep(NamedTuple):
    params: dict
    adam: AdamState
    loss: float
    grads: dict


def meta_step(params, episodes, hyper: MetaHyper, adam: AdamState, loss_fn: Callable) -> MetaStep:
    """One ADAM step on the initialisation.  Second-order mode differentiates
    through the inner update; first-order mode treats inner gradients as
    constants."""
    mg = meta_gradient(params, episodes, hyper, loss_fn)
    new_params, new_state = adam_update(params, mg.grads, adam, hyper.outer_lr)
    return MetaStep(new_params, new_state, mg.loss, mg.grads)


# -- update statistics ------------------------------------------------------------

@dataclass(frozen=True)
class Stats:
    avg: float  # mean magnitude over nonzero updates
    sum: float
    max: float
    nonzero: int
    total: int

    @classmethod
    def of(cls, mags: np.ndarray) -> "Stats":
        mags = np.abs(np.asarray(mags, dtype=np.float64)).ravel()
        nz = int(np.count_nonzero(mags))
        s, top = float(mags.sum()), float(mags.max(initial=0.0))
        # the clamp absorbs rounding in s / nz, which can exceed max by an ulp
        return cls(min(s / nz, top) if nz else 0.0, s, top, nz, int(mags.size))


@dataclass(frozen=True)
class UpdateStats:
    layers: dict  # layer name -> Stats
    overall: Stats

    def layer(self, name: str) -> Stats:
        if name not in self.layers:
            raise StructuralError(f"no statistics for layer {name!r}")
        return self.layers[name]


def _value(p):
    return p.value if isinstance(p, Node) else np.asarray(p)


def update_magnitudes(before: dict, after: dict) -> dict:
    """|after - before| grouped by layer, flattened."""
    if set(before) != set(after):
        raise StructuralError("parameter sets differ")
    groups: dict = {}
    for key in sorted(before):
        a, b = _value(before[key]), _value(after[key])
        if a.shape != b.shape:
            raise StructuralError(f"shape mismatch for {key}")
        groups.setdefault(layer_of(key), []).append(np.abs(b - a).ravel())
    return {layer: np.concatenate(parts) for layer, parts in groups.items()}


def update_stats(before: dict, after: dict) -> UpdateStats:
    mags = update_magnitudes(before, after)
    layers = {layer: Stats.of(m) for layer, m in mags.items()}
    every = np.concatenate(list(mags.values())) if mags else np.zeros(0)
    return UpdateStats(layers, Stats.of(every))


def log_histogram(mags: np.ndarray, bins: int = 50, lo: float = 1e-8, hi: float = 1.0):
    """Counts of nonzero magnitudes over logarithmic bins; values outside
    [lo, hi] are clipped into the end bins.  Returns (edges, counts)."""
    edges = np.logspace(math.log10(lo), math.log10(hi), bins + 1)
    mags = np.abs(np.asarray(mags, dtype=np.float64)).ravel()
    mags = np.clip(mags[mags > 0], lo, hi)
    counts, _ = np.histogram(mags, bins=edges)
    return edges, counts
