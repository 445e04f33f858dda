"""Leaky integrate-and-fire network with a fast-sigmoid surrogate gradient.

Per layer and timestep the dynamics are::

    u = W(p) - rho * r + b
    s = step(u - u_th)
    p <- alpha * p + (1 - alpha) * q
    q <- beta * q + (1 - beta) * s_pre
    r <- gamma * r + (1 - gamma) * s

``W`` is a dense or convolutional linear map applied to the presynaptic
membrane trace ``p``.  The step function is exact in the forward pass; its
derivative is replaced by ``1 / (k|x| + 1)**2`` with steepness ``k``, whose
own derivative is supplied so that gradients of gradients are exact.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import StructuralError

ParamSet = dict  # "layer.weight" / "layer.bias" -> Node


@dataclass(frozen=True)
class NeuronConfig:
    dt: float = 1.0
    tau_mem: float = 20.0
    tau_syn: float = 10.0
    tau_rfr: float = 10.0
    u_th: float = 1.0
    rho: float | None = None  # None means "same as u_th"
    surrogate_beta: float = 10.0
    # "smooth" emits the fast sigmoid x / (beta|x| + 1) instead of the step,
    # making the surrogate the true derivative; used for gradient checks
    spike_forward: str = "step"

    def __post_init__(self):
        if self.rho is None:
            object.__setattr__(self, "rho", self.u_th)
        self.validate()

    def validate(self) -> None:
        if not self.dt > 0:
            raise StructuralError("dt must be positive")
        for name in ("tau_mem", "tau_syn", "tau_rfr"):
            if not getattr(self, name) > self.dt:
                raise StructuralError(f"{name} must exceed dt")
        if not self.u_th > 0:
            raise StructuralError("u_th must be positive")
        if not self.rho >= 0:
            raise StructuralError("rho must be non-negative")
        if not self.surrogate_beta > 0:
            raise StructuralError("surrogate_beta must be positive")
        if self.spike_forward not in ("step", "smooth"):
            raise StructuralError("spike_forward must be 'step' or 'smooth'")


def decay_constants(config: NeuronConfig) -> tuple[float, float, float]:
    """(alpha, beta, gamma) = exp(-dt / tau) for membrane, synapse, refractory."""
    return (math.exp(-config.dt / config.tau_mem),
            math.exp(-config.dt / config.tau_syn),
            math.exp(-config.dt / config.tau_rfr))


def surrogate_slope(x: np.ndarray, beta: float) -> np.ndarray:
    """Fast-sigmoid derivative 1 / (beta|x| + 1)^2."""
    return 1.0 / (beta * np.abs(x) + 1.0) ** 2


def surrogate_curvature(x: np.ndarray, beta: float) -> np.ndarray:
    """Derivative of :func:`surrogate_slope`, with sign(0) = 0."""
    return -2.0 * beta * np.sign(x) / (beta * np.abs(x) + 1.0) ** 3


@functools.lru_cache(maxsize=None)
def _spike_op(u_th: float, beta: float, smooth: bool = False):
    def forward(u):
        if smooth:
            x = u - u_th
            return x / (beta * np.abs(x) + 1.0)
        return (u >= u_th).astype(u.dtype)

    def backward(u, g):
        return g * surrogate_slope(u - u_th, beta)

    def second(u, g, gg):
        x = u - u_th
        return gg * g * surrogate_curvature(x, beta), gg * surrogate_slope(x, beta)

    return ad.register_custom(forward, backward, second, name="spike")


def surrogate_spike(u: Node, config: NeuronConfig) -> Node:
    """Heaviside spike of ``u - u_th`` with the fast-sigmoid surrogate."""
    return _spike_op(float(config.u_th), float(config.surrogate_beta),
                     config.spike_forward == "smooth")(u)


# -- single layer dynamics ------------------------------------------------------

@dataclass
class LifState:
    """Traces of one LIF layer: p, q over presynaptic units, r and u over
    postsynaptic units."""

    p: Node
    q: Node
    r: Node
    u: Node

    @classmethod
    def zeros(cls, pre_shape: tuple, post_shape: tuple, dtype=None) -> "LifState":
        dtype = dtype or ad.get_default_dtype()
        return cls(Node(np.zeros(pre_shape, dtype)), Node(np.zeros(pre_shape, dtype)),
                   Node(np.zeros(post_shape, dtype)), Node(np.zeros(post_shape, dtype)))


def _dense(p: Node, weight: Node, bias: Node) -> Node:
    return ad.add(ad.matmul(p, ad.swap_last(weight)), bias)


def lif_step(state: LifState, presyn_spikes, weight: Node, bias: Node,
             config: NeuronConfig, padding: int | None = None):
    """Advance one layer by one timestep.

    A 4-D ``weight`` selects the convolutional linear map (same padding
    unless ``padding`` is given); a 2-D weight selects the dense one.
    Returns ``(new_state, spikes, u)``.
    """
    presyn_spikes = ad.as_node(presyn_spikes)
    if presyn_spikes.shape != state.q.shape:
        raise StructuralError(
            f"presynaptic spikes {presyn_spikes.shape} do not match traces {state.q.shape}")
    alpha, beta, gamma = decay_constants(config)
    if weight.ndim == 4:
        pad = weight.shape[-1] // 2 if padding is None else padding
        drive = ad.conv2d(state.p, weight, bias, padding=pad)
    elif weight.ndim == 2:
        if state.p.shape[-1] != weight.shape[1]:
            raise StructuralError(f"dense weight {weight.shape} does not fit input {state.p.shape}")
        drive = _dense(state.p, weight, bias)
    else:
        raise StructuralError("weight must be 2-D (dense) or 4-D (conv)")
    if drive.shape != state.r.shape:
        raise StructuralError(f"layer output {drive.shape} does not match state {state.r.shape}")
    u = ad.sub(drive, ad.scale(state.r, config.rho)) if config.rho else drive
    s = surrogate_spike(u, config)
    p = ad.lerp(state.p, state.q, alpha)
    q = ad.lerp(state.q, presyn_spikes, beta)
    r = ad.lerp(state.r, s, gamma)
    return LifState(p, q, r, u), s, u


def three_factor_grad(loss_grad_at_spikes, u, p, config: NeuronConfig) -> Node:
    """Weight gradient of one dense layer at one timestep as a product of an
    error signal, the postsynaptic surrogate slope and the presynaptic trace.

    Inputs may carry a leading batch axis, which is summed over.
    """
    e = np.asarray(ad.as_node(loss_grad_at_spikes).value)
    u = np.asarray(ad.as_node(u).value)
    p = np.asarray(ad.as_node(p).value)
    if e.shape != u.shape or e.shape[:-1] != p.shape[:-1]:
        raise StructuralError(f"shapes {e.shape}, {u.shape}, {p.shape} are inconsistent")
    post = e * surrogate_slope(u - config.u_th, config.surrogate_beta)
    if post.ndim == 1:
        return Node(np.outer(post, p))
    return Node(np.einsum("bi,bj->ij", post.reshape(-1, post.shape[-1]), p.reshape(-1, p.shape[-1])))


# -- network --------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "pool" or "dense"
    name: str
    out: int = 0  # channels for conv, units for dense
    kernel: int = 5
    stride: int = 1
    padding: int | None = None  # None -> same padding (kernel // 2)
    neuron: NeuronConfig | None = None

    def __post_init__(self):
        if self.kind not in ("conv", "pool", "dense"):
            raise StructuralError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "dense") and self.out < 1:
            raise StructuralError(f"layer {self.name} needs a positive width")
        if self.kind == "conv" and (self.kernel < 1 or self.stride < 1):
            raise StructuralError(f"layer {self.name}: bad kernel/stride")

    @property
    def pad(self) -> int:
        return self.kernel // 2 if self.padding is None else self.padding


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple  # (polarities, H, W)
    layers: tuple
    neuron: NeuronConfig = field(default_factory=NeuronConfig)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise StructuralError("layer names must be unique")
        if not self.layers or self.layers[-1].kind != "dense":
            raise StructuralError("the last layer must be the dense readout")
        if any(layer.kind == "dense" for layer in self.layers[:-1]):
            raise StructuralError("only the final layer may be dense")
        self.shapes()

    def neuron_for(self, layer: LayerSpec) -> NeuronConfig:
        return layer.neuron or self.neuron

    @property
    def ways(self) -> int:
        return self.layers[-1].out

    @property
    def lif_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind != "pool"]

    @property
    def readout(self) -> LayerSpec:
        return self.layers[-1]

    def shapes(self) -> list[tuple[str, tuple]]:
        """Per-layer output shape, (C, H, W) for spatial layers and (K,) for
        the readout."""
        out = []
        c, h, w = self.input_shape
        for layer in self.layers:
            if layer.kind == "conv":
                h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise StructuralError(f"layer {layer.name} shrinks the input to nothing")
                c = layer.out
                out.append((layer.name, (c, h, w)))
            elif layer.kind == "pool":
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise StructuralError(f"layer {layer.name} pools a 1-pixel map")
                out.append((layer.name, (c, h, w)))
            else:
                out.append((layer.name, (layer.out,)))
        return out

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        c, h, w = self.input_shape
        for layer, (_, shape) in zip(self.layers, self.shapes()):
            if layer.kind == "conv":
                shapes[f"{layer.name}.weight"] = (layer.out, c, layer.kernel, layer.kernel)
                shapes[f"{layer.name}.bias"] = (layer.out,)
            elif layer.kind == "dense":
                shapes[f"{layer.name}.weight"] = (layer.out, c * h * w)
                shapes[f"{layer.name}.bias"] = (layer.out,)
            if layer.kind != "dense":
                c, h, w = shape
        return shapes

    def with_ways(self, ways: int) -> "NetworkSpec":
        layers = list(self.layers)
        layers[-1] = replace(layers[-1], out=ways)
        return replace(self, layers=tuple(layers))


def table1_spec(dataset: str = "nmnist", ways: int = 5, channels=(32, 64, 128),
                neuron: NeuronConfig | None = None) -> NetworkSpec:
    """Three 5x5 same-padded conv layers, each followed by 2x2 max pooling,
    and a dense readout."""
    geometry = {"nmnist": (16, 32), "asl": (30, 80)}
    if dataset not in geometry:
        raise StructuralError(f"unknown dataset {dataset!r}")
    return conv_spec((2, *geometry[dataset]), ways, channels, neuron)


def conv_spec(input_shape, ways: int, channels, neuron: NeuronConfig | None = None,
              kernel: int = 5) -> NetworkSpec:
    layers = []
    for i, ch in enumerate(channels, start=1):
        layers.append(LayerSpec("conv", f"conv{i}", out=ch, kernel=kernel))
        layers.append(LayerSpec("pool", f"pool{i}"))
    layers.append(LayerSpec("dense", "out", out=ways))
    return NetworkSpec(tuple(input_shape), tuple(layers), neuron or NeuronConfig())


def build_network(spec: NetworkSpec, seed: int) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = ad.get_default_dtype()
    params = {}
    for key, shape in spec.param_shapes().items():
        if key.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(1.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            value = np.zeros(shape, dtype=dtype)
        params[key] = Node(value, requires_grad=True)
    return params


def init_readout(spec: NetworkSpec, params: ParamSet, seed: int) -> ParamSet:
    """Copy of ``params`` with a freshly initialised readout layer."""
    fresh = build_network(spec, seed)
    name = spec.readout.name
    out = dict(params)
    for key in (f"{name}.weight", f"{name}.bias"):
        out[key] = fresh[key]
    return out


# -- time loop ------------------------------------------------------------------

def _initial_states(spec: NetworkSpec, batch: int) -> list[LifState]:
    states = []
    c, h, w = spec.input_shape
    pre = (batch, c, h, w)
    for layer, (_, shape) in zip(spec.layers, spec.shapes()):
        if layer.kind == "pool":
            pre = (batch, *shape)
            continue
        if layer.kind == "dense":
            pre = (batch, int(np.prod(pre[1:])))
        states.append(LifState.zeros(pre, (batch, *shape)))
        pre = (batch, *shape)
    return states


def _pool(s: Node) -> Node:
    h, w = s.shape[-2:]
    if h % 2 or w % 2:
        s = ad.crop2d(s, 0, h - h % 2, 0, w - w % 2)
    return ad.maxpool2(s)


def _network_step(params: ParamSet, spec: NetworkSpec, states: list[LifState], frame,
                  stop_before_readout: bool = False):
    x = frame
    new_states = []
    i = 0
    for layer in spec.layers:
        if layer.kind == "pool":
            x = _pool(x)
            continue
        if layer.kind == "dense":
            if stop_before_readout:
                return new_states, x
            x = ad.reshape(x, (x.shape[0], -1))
        st, s, u = lif_step(states[i], x, params[f"{layer.name}.weight"],
                            params[f"{layer.name}.bias"], spec.neuron_for(layer), layer.pad)
        new_states.append(st)
        x = s if layer.kind == "conv" else u
        i += 1
    return new_states, x


def _check_window(total: int, burn_in: int, window: int) -> None:
    if window < 1 or burn_in < 0:
        raise StructuralError("window must be >= 1 and burn-in >= 0")
    if burn_in + window != total:
        if window > total:
            raise StructuralError(f"loss window {window} longer than sequence {total}")
        raise StructuralError(f"burn-in {burn_in} + window {window} != {total} frames")


def snn_forward(params: ParamSet, frames, spec: NetworkSpec, burn_in: int, window: int) -> Node:
    """Run the network from zero state over ``frames`` (T, B, C, H, W).

    The first ``burn_in`` steps run without recording lineage; the readout
    membrane potentials of the last ``window`` steps are returned as a
    (window, B, K) node.
    """
    frames = np.asarray(frames)
    if frames.ndim != 5 or frames.shape[2:] != spec.input_shape:
        raise StructuralError(f"frames {frames.shape} do not match input {spec.input_shape}")
    _check_window(frames.shape[0], burn_in, window)
    dtype = ad.get_default_dtype()
    states = _initial_states(spec, frames.shape[1])
    with ad.no_grad():
        for t in range(burn_in):
            states, _ = _network_step(params, spec, states, Node(frames[t].astype(dtype, copy=False)))
        states = [LifState(*(n.detach() for n in (s.p, s.q, s.r, s.u))) for s in states]
    outputs = []
    for t in range(burn_in, burn_in + window):
        states, u = _network_step(params, spec, states, Node(frames[t].astype(dtype, copy=False)))
        outputs.append(u)
    return ad.stack(outputs, axis=0)


def feature_spikes(params: ParamSet, frames, spec: NetworkSpec) -> np.ndarray:
    """Spike trains feeding the readout, (T, B, F), computed without lineage.

    Only valid while the layers below the readout are held fixed.
    """
    frames = np.asarray(frames)
    dtype = ad.get_default_dtype()
    states = _initial_states(spec, frames.shape[1])[:-1]
    out = []
    with ad.no_grad():
        for t in range(frames.shape[0]):
            states, x = _network_step(params, spec, states, Node(frames[t].astype(dtype, copy=False)),
                                      stop_before_readout=True)
            out.append(x.value.reshape(x.shape[0], -1))
    return np.stack(out)


def readout_forward(params: ParamSet, features: np.ndarray, spec: NetworkSpec,
                    burn_in: int, window: int) -> Node:
    """Readout-only counterpart of :func:`snn_forward` on cached features."""
    _check_window(features.shape[0], burn_in, window)
    layer = spec.readout
    weight, bias = params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]
    state = LifState.zeros(features.shape[1:], (features.shape[1], layer.out))
    config = spec.neuron_for(layer)
    with ad.no_grad():
        for t in range(burn_in):
            state, _, _ = lif_step(state, Node(features[t]), weight, bias, config)
        state = LifState(*(n.detach() for n in (state.p, state.q, state.r, state.u)))
    outputs = []
    for t in range(burn_in, burn_in + window):
        state, _, u = lif_step(state, Node(features[t]), weight, bias, config)
        outputs.append(u)
    return ad.stack(outputs, axis=0)


def readout_and_loss(membranes: Node, targets):
    """Max membrane over time as logits; predictions break ties to the lower
    class index.  Returns ``(predictions, loss)``."""
    if membranes.ndim != 3:
        raise StructuralError(f"membranes must be (T, B, K), got {membranes.shape}")
    logits = ad.max(membranes, axis=0)
    predictions = np.argmax(logits.value, axis=1)
    return predictions, ad.softmax_cross_entropy(logits, np.asarray(targets))


@dataclass(frozen=True)
class Objective:
    """Cross-entropy of the max-membrane readout over the loss window, as a
    ``loss_fn(params, frames, targets)`` callable for the meta module."""

    spec: NetworkSpec
    burn_in: int
    window: int

    def __call__(self, params: ParamSet, frames, targets) -> Node:
        membranes = snn_forward(params, frames, self.spec, self.burn_in, self.window)
        return readout_and_loss(membranes, targets)[1]

    def predict(self, params: ParamSet, frames) -> np.ndarray:
        with ad.no_grad():
            membranes = snn_forward(params, frames, self.spec, self.burn_in, self.window)
        return np.argmax(membranes.value.max(axis=0), axis=1)
