"""Synthetic event classes: a small dot moving along a class-specific
direction, ON events at its leading position and OFF events trailing it,
over Poisson background noise."""

from __future__ import annotations

import math

import numpy as np

from ..errors import StructuralError
from .stream import EventStream, make_events

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
_DOT = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))
_STEP_US = 1000


def class_angle(class_id: int) -> float:
    return (class_id * GOLDEN_ANGLE) % (2 * math.pi)


class Trajectory:
    """Straight-line path leaving the sensor centre, jittered per sample in
    start offset (up to 1 px per axis) and speed (+-10%)."""

    def __init__(self, class_id: int, sample_seed: int, width: int, height: int, duration: int,
                 speed: float = 0.07):
        rng = np.random.default_rng([int(class_id), int(sample_seed)])
        self.angle = class_angle(class_id)
        self.speed = speed / 1000.0 * rng.uniform(0.9, 1.1)  # px per us
        offset = rng.uniform(-1.0, 1.0, size=2)
        self.direction = np.array([math.cos(self.angle), math.sin(self.angle)])
        centre = np.array([(width - 1) / 2.0, (height - 1) / 2.0]) + offset
        self.start = centre
        self.width, self.height = width, height
        self.lag = 1.5 / self.speed  # OFF trail sits 1.5 px behind the head
        self.rng = rng

    def position(self, t_us) -> np.ndarray:
        t = np.asarray(t_us, dtype=np.float64)[..., None]
        return self.start + self.direction * self.speed * t

    def pixels(self, t_us) -> tuple[np.ndarray, np.ndarray]:
        pos = np.rint(self.position(t_us)).astype(np.int64)
        return (np.clip(pos[..., 0], 0, self.width - 1), np.clip(pos[..., 1], 0, self.height - 1))


def synth_class(class_id: int, sample_seed: int, width: int = 16, height: int = 16,
                duration: int = 100_000, noise_rate: float = 0.1,
                speed: float = 0.07) -> EventStream:
    """One sample of synthetic class ``class_id``.

    ``duration`` is in µs, ``noise_rate`` in events per pixel per 100 ms and
    ``speed`` in pixels per ms.  Positions are clipped to the sensor.
    """
    if width < 8 or height < 8:
        raise StructuralError("synthetic geometry must be at least 8x8")
    if duration < 50_000:
        raise StructuralError("synthetic streams must last at least 50 ms")
    if noise_rate < 0:
        raise StructuralError("noise rate must be non-negative")
    traj = Trajectory(class_id, sample_seed, width, height, duration, speed)
    times = np.arange(0, duration, _STEP_US, dtype=np.int64)
    parts = []
    for pol, shift in ((1, 0.0), (0, traj.lag)):
        cx, cy = traj.pixels(times - shift)
        live = times - shift >= 0
        for dx, dy in _DOT:
            x = np.clip(cx + dx, 0, width - 1)
            y = np.clip(cy + dy, 0, height - 1)
            parts.append((times[live], x[live], y[live], np.full(live.sum(), pol)))
    n_noise = traj.rng.poisson(noise_rate * width * height * duration / 100_000)
    if n_noise:
        rng = traj.rng
        parts.append((rng.integers(0, duration, n_noise), rng.integers(0, width, n_noise),
                      rng.integers(0, height, n_noise), rng.integers(0, 2, n_noise)))
    t, x, y, p = (np.concatenate(col) for col in zip(*parts))
    order = np.argsort(t, kind="stable")
    return EventStream(width, height, duration, make_events(t[order], x[order], y[order], p[order]))
