"""Meta-splits over ordered class pairs and N-shot K-way episode sampling."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, StructuralError

PARTS = ("train", "val", "test")


@dataclass(frozen=True)
class MetaSplit:
    """Disjoint task lists; a task is a tuple of class labels."""

    train: tuple
    val: tuple
    test: tuple
    seed: int = 0

    def __post_init__(self):
        for name in PARTS:
            object.__setattr__(self, name, tuple(tuple(t) for t in getattr(self, name)))
        seen = set()
        for name in PARTS:
            part = set(getattr(self, name))
            if len(part) != len(getattr(self, name)):
                raise StructuralError(f"duplicate task in split part {name!r}")
            if seen & part:
                raise StructuralError("split parts overlap")
            seen |= part

    def part(self, name: str) -> tuple:
        if name not in PARTS:
            raise StructuralError(f"unknown split part {name!r}, expected one of {PARTS}")
        return getattr(self, name)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def ordered_pairs(class_labels) -> list[tuple]:
    """Every ordered pair, repeats included: n labels give n*n tasks."""
    labels = list(class_labels)
    return list(itertools.product(labels, repeat=2))


def make_meta_splits(class_labels, split_sizes, seed: int, pairs: bool = True) -> MetaSplit:
    """Shuffle the task list by ``seed`` and cut it into train/val/test.

    With ``pairs`` the tasks are ordered class pairs, otherwise single
    classes.
    """
    labels = list(class_labels)
    if len(set(labels)) != len(labels):
        raise StructuralError("class labels must be unique")
    tasks = ordered_pairs(labels) if pairs else [(label,) for label in labels]
    sizes = [int(s) for s in split_sizes]
    if len(sizes) != 3 or min(sizes) < 0:
        raise StructuralError("need three non-negative split sizes")
    if sum(sizes) > len(tasks):
        raise StructuralError(f"split sizes {tuple(sizes)} need {sum(sizes)} tasks, only {len(tasks)} exist")
    order = np.random.default_rng(seed).permutation(len(tasks))
    shuffled = [tasks[i] for i in order]
    a, b = sizes[0], sizes[0] + sizes[1]
    return MetaSplit(shuffled[:a], shuffled[a:b], shuffled[b:b + sizes[2]], seed)


def write_manifest(split: MetaSplit) -> str:
    lines = [f"# meta-split seed={split.seed}"]
    for name in PARTS:
        lines.append(f"[{name}]")
        lines.extend(" ".join(str(c) for c in task) for task in split.part(name))
    return "\n".join(lines) + "\n"


def _label(token: str):
    return int(token) if token.lstrip("-").isdigit() else token


def read_manifest(text: str) -> MetaSplit:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# meta-split seed="):
        raise FormatError("missing manifest seed header", offset=0)
    try:
        seed = int(lines[0].split("=", 1)[1])
    except ValueError:
        raise FormatError("bad seed in manifest header", offset=0) from None
    parts = {name: [] for name in PARTS}
    current = None
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1]
            if current not in parts:
                raise FormatError(f"unknown section {stripped}", offset=offset)
        elif stripped:
            if current is None:
                raise FormatError("task before any section", offset=offset)
            parts[current].append(tuple(_label(tok) for tok in stripped.split()))
        offset += len(line) + 1
    return MetaSplit(parts["train"], parts["val"], parts["test"], seed)


@dataclass(frozen=True)
class Episode:
    """One K-way task: support frames (T, K*shots, C, H, W) ordered class by
    class, query frames likewise, and episode-local labels 0..K-1."""

    tasks: tuple
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_ids: tuple = ()
    query_ids: tuple = ()

    @property
    def ways(self) -> int:
        return len(self.tasks)


def sample_episode(split_part, dataset, ways: int, shots: int, query_per_class: int,
                   seed) -> Episode:
    """Draw ``ways`` tasks without replacement, then disjoint support and
    query samples for each.  ``dataset`` provides ``samples_per_task``,
    ``frame_shape`` and ``frames(task, index)``."""
    tasks = list(split_part)
    if ways < 1 or shots < 0 or query_per_class < 0:
        raise StructuralError("ways must be >= 1, shots and query >= 0")
    if ways > len(tasks):
        raise StructuralError(f"{ways}-way episode needs {ways} tasks, split part has {len(tasks)}")
    if shots + query_per_class > dataset.samples_per_task:
        raise StructuralError(
            f"need {shots + query_per_class} samples per task, dataset has {dataset.samples_per_task}")
    rng = np.random.default_rng(seed)
    chosen = [tasks[i] for i in rng.choice(len(tasks), size=ways, replace=False)]
    sup_ids, qry_ids = [], []
    for task in chosen:
        idx = rng.choice(dataset.samples_per_task, size=shots + query_per_class, replace=False)
        sup_ids.extend((task, int(i)) for i in idx[:shots])
        qry_ids.extend((task, int(i)) for i in idx[shots:])

    def gather(ids):
        if not ids:
            steps, *rest = dataset.frame_shape
            return np.zeros((steps, 0, *rest))
        return np.stack([dataset.frames(task, i) for task, i in ids], axis=1)

    labels = np.arange(ways)
    return Episode(tuple(chosen), gather(sup_ids), np.repeat(labels, shots),
                   gather(qry_ids), np.repeat(labels, query_per_class),
                   tuple(sup_ids), tuple(qry_ids))
