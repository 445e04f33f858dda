"""Metrics records and their CSV form.

Floats are written with ``repr`` so that parsing a file gives back the exact
in-memory values.  Wall-clock times are kept out of these files (see
``timing.json``) so that re-runs produce identical metrics.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError


@dataclass
class MetricsRecord:
    """Per-trial accuracies of one setting; mean and std derive from them."""

    setting: str
    accuracies: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else math.nan

    def summary(self) -> str:
        return f"{self.setting}: {100 * self.mean:.2f} +- {100 * self.std:.2f} % over {len(self.accuracies)} trials"


@dataclass
class TrainLog:
    """Per meta-iteration mean episode loss, plus periodic validation."""

    losses: list = field(default_factory=list)
    val: dict = field(default_factory=dict)  # iteration -> accuracy


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def read_table(path, header) -> list[list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != list(header):
        raise FormatError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


METRICS_HEADER = ("setting", "trial", "accuracy")


def write_metrics(path, records) -> None:
    write_table(path, METRICS_HEADER,
                [(r.setting, i, a) for r in records for i, a in enumerate(r.accuracies)])


def read_metrics(path) -> list[MetricsRecord]:
    records: dict = {}
    for line, row in enumerate(read_table(path, METRICS_HEADER), start=2):
        try:
            setting, trial, acc = row[0], int(row[1]), float(row[2])
        except (ValueError, IndexError):
            raise FormatError(f"{path}: malformed row at line {line}") from None
        rec = records.setdefault(setting, MetricsRecord(setting))
        if trial != len(rec.accuracies):
            raise FormatError(f"{path}: trials out of order at line {line}")
        rec.accuracies.append(acc)
    return list(records.values())


TRAIN_HEADER = ("iteration", "loss", "val_accuracy")


def write_train_log(path, log: TrainLog) -> None:
    write_table(path, TRAIN_HEADER,
                [(i + 1, loss, log.val.get(i + 1, "")) for i, loss in enumerate(log.losses)])


def read_train_log(path) -> TrainLog:
    log = TrainLog()
    for line, row in enumerate(read_table(path, TRAIN_HEADER), start=2):
        try:
            it, loss = int(row[0]), float(row[1])
            if row[2]:
                log.val[it] = float(row[2])
        except (ValueError, IndexError):
            raise FormatError(f"{path}: malformed row at line {line}") from None
        log.losses.append(loss)
    return log
