"""Task datasets: each task (one class or an ordered class pair) yields
rasterized frame sequences on demand.

A pair task ``(a, b)`` places a sample of ``a`` left of a sample of ``b``,
then crops in time, downsamples in space and bins into frames.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, StructuralError
from .stream import (EventStream, compose_double, crop_temporal, downsample_spatial, load_events,
                     rasterize, save_events)
from .synth import synth_class


@dataclass(frozen=True)
class Pipeline:
    """Stream-to-frames settings shared by every dataset."""

    crop_ms: float | None = 100.0  # keep [0, crop_ms); None keeps the whole stream
    downsample: tuple = (1, 1)  # (x factor, y factor)
    bin_ms: float = 1.0
    binarize: bool = False

    def apply(self, stream: EventStream) -> np.ndarray:
        if self.crop_ms is not None:
            end = int(round(self.crop_ms * 1000))
            if end < stream.duration:
                stream = crop_temporal(stream, 0, end)
            elif end > stream.duration:
                raise StructuralError(f"crop of {self.crop_ms} ms exceeds stream duration")
        stream = downsample_spatial(stream, *self.downsample)
        return rasterize(stream, self.bin_ms, self.binarize).frames


class TaskDataset:
    """Base class; subclasses provide ``base_stream(label, index)``."""

    def __init__(self, labels, samples_per_task: int, pairs: bool, pipeline: Pipeline):
        if samples_per_task < 1:
            raise StructuralError("samples_per_task must be >= 1")
        self.labels = tuple(labels)
        self.samples_per_task = int(samples_per_task)
        self.pairs = pairs
        self.pipeline = pipeline
        self._cache: dict = {}

    def base_stream(self, label, index: int) -> EventStream:
        raise NotImplementedError

    def stream(self, task, index: int) -> EventStream:
        task = tuple(task)
        if any(label not in self.labels for label in task):
            raise StructuralError(f"task {task} uses unknown classes")
        if not 0 <= index < self.samples_per_task:
            raise StructuralError(f"sample index {index} out of range")
        if self.pairs:
            if len(task) != 2:
                raise StructuralError(f"pair dataset needs 2-class tasks, got {task}")
            # distinct base samples on each side, so (a, a) is never a mirrored copy
            return compose_double(self.base_stream(task[0], 2 * index),
                                  self.base_stream(task[1], 2 * index + 1))
        if len(task) != 1:
            raise StructuralError(f"single-class dataset needs 1-class tasks, got {task}")
        return self.base_stream(task[0], index)

    def frames(self, task, index: int) -> np.ndarray:
        key = (tuple(task), int(index))
        if key not in self._cache:
            frames = self.pipeline.apply(self.stream(task, index))
            frames.setflags(write=False)
            self._cache[key] = frames
        return self._cache[key]

    @property
    def frame_shape(self) -> tuple:
        return self.frames(self.tasks()[0], 0).shape

    def tasks(self) -> list[tuple]:
        if self.pairs:
            return [(a, b) for a in self.labels for b in self.labels]
        return [(a,) for a in self.labels]


class SyntheticDataset(TaskDataset):
    """Classes from :func:`synth_class`; ``seed`` shifts every sample seed."""

    def __init__(self, n_classes: int, samples_per_task: int = 20, width: int = 16, height: int = 16,
                 duration_ms: float = 100.0, noise_rate: float = 0.1, speed: float = 0.07,
                 pairs: bool = True, pipeline: Pipeline | None = None, seed: int = 0):
        if n_classes < 1:
            raise StructuralError("need at least one synthetic class")
        super().__init__(range(n_classes), samples_per_task, pairs, pipeline or Pipeline())
        self.width, self.height = width, height
        self.duration = int(round(duration_ms * 1000))
        self.noise_rate, self.speed, self.seed = noise_rate, speed, seed

    def base_stream(self, label, index: int) -> EventStream:
        return synth_class(label, self.seed * 1_000_003 + index, self.width, self.height,
                           self.duration, self.noise_rate, self.speed)


class DirectoryDataset(TaskDataset):
    """EVS1 files laid out as ``root/<class label>/<name>.evs``.

    Files of a class are taken in sorted name order; base sample ``i`` is
    file ``i mod n``.
    """

    def __init__(self, root, samples_per_task: int | None = None, pairs: bool = True,
                 pipeline: Pipeline | None = None):
        root = os.fspath(root)
        if not os.path.isdir(root):
            raise FormatError(f"dataset directory {root} not found")
        files = {}
        for entry in sorted(os.listdir(root)):
            path = os.path.join(root, entry)
            if os.path.isdir(path):
                names = sorted(n for n in os.listdir(path) if n.endswith(".evs"))
                if names:
                    files[_parse_label(entry)] = [os.path.join(path, n) for n in names]
        if not files:
            raise FormatError(f"no .evs files under {root}")
        fewest = min(len(v) for v in files.values())
        available = max(fewest // 2, 1) if pairs else fewest
        if samples_per_task is None:
            samples_per_task = available
        self.files = files
        super().__init__(sorted(files), samples_per_task, pairs, pipeline or Pipeline())

    def base_stream(self, label, index: int) -> EventStream:
        paths = self.files[label]
        path = paths[index % len(paths)]
        try:
            return load_events(path)
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from None


def _parse_label(name: str):
    return int(name) if name.isdigit() else name


def save_synthetic(root, n_classes: int, samples_per_class: int, width: int = 16, height: int = 16,
                   duration_ms: float = 100.0, noise_rate: float = 0.1, speed: float = 0.07,
                   seed: int = 0) -> int:
    """Write base synthetic streams as an EVS1 directory tree; returns the
    number of files written."""
    ds = SyntheticDataset(n_classes, 1, width, height, duration_ms, noise_rate, speed, seed=seed)
    digits = max(1, math.ceil(math.log10(max(samples_per_class, 2))))
    count = 0
    for label in ds.labels:
        folder = os.path.join(os.fspath(root), str(label))
        os.makedirs(folder, exist_ok=True)
        for i in range(samples_per_class):
            save_events(os.path.join(folder, f"{i:0{digits}d}.evs"), ds.base_stream(label, i))
            count += 1
    return count
