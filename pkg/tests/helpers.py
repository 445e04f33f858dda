"""Independent numerical oracles used across the test suite."""

import numpy as np


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x.copy())
        flat[i] = orig - h
        lo = f(x.copy())
        flat[i] = orig
        out[i] = (hi - lo) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7, floor=1e-8):
    """Relative error where |g| > floor, absolute error elsewhere."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    big = np.abs(analytic) > floor
    rel = np.abs(analytic - numeric)[big] / np.abs(analytic)[big]
    if rel.size:
        assert rel.max() < rtol, f"max relative error {rel.max():.3e}"
    small = ~big
    if small.any():
        err = np.abs(analytic - numeric)[small].max()
        assert err < atol, f"max absolute error {err:.3e}"


def mini_spec(spike_forward="smooth", ways=3, rho=None):
    """Two LIF layers (3x3 conv, dense readout) on 2x4x4 input: 65 parameters."""
    from snnmaml import snn

    neuron = snn.NeuronConfig(u_th=0.2, surrogate_beta=2.0, spike_forward=spike_forward, rho=rho)
    layers = (snn.LayerSpec("conv", "conv1", out=2, kernel=3),
              snn.LayerSpec("pool", "pool1"),
              snn.LayerSpec("dense", "out", out=ways))
    return snn.NetworkSpec((2, 4, 4), layers, neuron)


def mini_batch(seed, steps=20, batch=3, ways=3, rate=0.3):
    rng = np.random.default_rng(seed)
    frames = (rng.random((steps, batch, 2, 4, 4)) < rate).astype(np.float64)
    return frames, rng.integers(0, ways, batch)


def flatten(params):
    keys = sorted(params)
    return keys, np.concatenate([params[k].value.ravel() for k in keys])


def unflatten(keys, shapes, vec, requires_grad=False):
    from snnmaml.autodiff import Node

    out, i = {}, 0
    for k in keys:
        n = int(np.prod(shapes[k]))
        out[k] = Node(vec[i:i + n].reshape(shapes[k]).copy(), requires_grad=requires_grad)
        i += n
    return out


def tiny_config(**sections):
    """A harness configuration small enough for unit tests (seconds)."""
    from snnmaml.harness import config

    data = {
        "dataset": {"n_classes": 3, "samples_per_task": 4, "width": 8, "height": 8, "duration_ms": 50.0, "crop_ms": 50.0,
                    "split_sizes": [5, 2, 2]},
        "network": {"channels": [2, 2, 2], "kernel": 3},
        "neuron": {"u_th": 0.02},
        "meta": {"tasks_per_meta_batch": 2},
        "episode": {"ways": 2, "shots": 1, "query": 2},
        "train": {"meta_iterations": 2, "eval_every": 1, "eval_episodes": 2},
        "eval": {"trials": 2, "episodes_per_trial": 2, "split": "test"},
        "experiment": {"steps_list": [0, 1, 2], "baseline_iterations": 2, "baseline_batch": 4,
                       "pretrain_iterations": 2, "pretrain_batch": 4, "readout_iterations": 2,
                       "max_shots": 2, "transfer_query": 2, "transfer_trials": 2},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            data.setdefault(key, {}).update(value)
        else:
            data[key] = value
    return config.from_dict(data)
