"""Event streams, the EVS1 file format and stream transforms.

EVS1 layout (all little-endian)::

    0   4s  magic b"EVS1"
    4   u16 width
    6   u16 height
    8   u32 duration in microseconds
    12  u32 event count
    16  records of 9 bytes: u32 t (us), u16 x, u16 y, u8 polarity
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, StructuralError

MAGIC = b"EVS1"
HEADER = struct.Struct("<4sHHII")
EVENT_DTYPE = np.dtype([("t", "<u4"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
assert HEADER.size == 16 and EVENT_DTYPE.itemsize == 9


def make_events(t, x, y, p) -> np.ndarray:
    events = np.zeros(len(t), dtype=EVENT_DTYPE)
    events["t"], events["x"], events["y"], events["p"] = t, x, y, p
    return events


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-sorted DVS events plus sensor geometry; ``duration`` in µs."""

    width: int
    height: int
    duration: int
    events: np.ndarray

    def __post_init__(self):
        events = np.asarray(self.events)
        if events.dtype != EVENT_DTYPE:
            events = events.astype(EVENT_DTYPE)
        object.__setattr__(self, "events", events)
        self.validate()

    def validate(self) -> None:
        ev = self.events
        if not (0 < self.width < 2**16 and 0 < self.height < 2**16):
            raise StructuralError(f"bad geometry {self.width}x{self.height}")
        if not 0 < self.duration < 2**32:
            raise StructuralError(f"bad duration {self.duration}")
        if len(ev) == 0:
            return
        if np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise StructuralError("events are not sorted by timestamp")
        if ev["t"][-1] >= self.duration:
            raise StructuralError("event timestamp beyond stream duration")
        if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
            raise StructuralError("event outside the sensor geometry")
        if ev["p"].max() > 1:
            raise StructuralError("polarity must be 0 or 1")

    def __len__(self) -> int:
        return len(self.events)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return ((self.width, self.height, self.duration) == (other.width, other.height, other.duration)
                and self.events.tobytes() == other.events.tobytes())

    __hash__ = None


def write_events(stream: EventStream) -> bytes:
    header = HEADER.pack(MAGIC, stream.width, stream.height, stream.duration, len(stream.events))
    return header + stream.events.tobytes()


def read_events(data: bytes) -> EventStream:
    if len(data) < HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    magic, width, height, duration, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    end = HEADER.size + count * EVENT_DTYPE.itemsize
    if len(data) < end:
        complete = (len(data) - HEADER.size) // EVENT_DTYPE.itemsize
        raise FormatError(f"truncated record {complete} of {count}",
                          offset=HEADER.size + complete * EVENT_DTYPE.itemsize)
    if len(data) > end:
        raise FormatError("trailing bytes after the last record", offset=end)
    events = np.frombuffer(data, dtype=EVENT_DTYPE, count=count, offset=HEADER.size).copy()

    def offset_of(i: int) -> int:
        return HEADER.size + int(i) * EVENT_DTYPE.itemsize

    bad = np.flatnonzero(events["p"] > 1)
    if bad.size:
        raise FormatError(f"polarity {events['p'][bad[0]]} not in {{0, 1}}", offset=offset_of(bad[0]))
    back = np.flatnonzero(np.diff(events["t"].astype(np.int64)) < 0)
    if back.size:
        raise FormatError("timestamps not sorted", offset=offset_of(back[0] + 1))
    outside = np.flatnonzero((events["x"] >= width) | (events["y"] >= height) | (events["t"] >= duration))
    if outside.size:
        raise FormatError("event outside geometry or duration", offset=offset_of(outside[0]))
    try:
        return EventStream(width, height, duration, events)
    except StructuralError as exc:
        raise FormatError(str(exc), offset=0) from None


def save_events(path, stream: EventStream) -> None:
    with open(path, "wb") as fh:
        fh.write(write_events(stream))


def load_events(path) -> EventStream:
    with open(path, "rb") as fh:
        return read_events(fh.read())


def compose_double(a: EventStream, b: EventStream) -> EventStream:
    """Place ``b`` to the right of ``a``; equal timestamps keep ``a`` first."""
    if a.height != b.height or a.duration != b.duration:
        raise StructuralError("compose_double needs equal height and duration")
    shifted = b.events.copy()
    shifted["x"] = shifted["x"].astype(np.int64) + a.width
    merged = np.concatenate([a.events, shifted])
    order = np.argsort(merged["t"], kind="stable")
    return EventStream(a.width + b.width, a.height, a.duration, merged[order])


def downsample_spatial(s: EventStream, factor, factor_y=None) -> EventStream:
    """Integer-divide pixel coordinates; ``factor_y`` defaults to ``factor``."""
    fx = factor
    fy = factor if factor_y is None else factor_y
    if int(fx) != fx or int(fy) != fy or fx < 1 or fy < 1:
        raise StructuralError("downsample factors must be integers >= 1")
    fx, fy = int(fx), int(fy)
    if fx == fy == 1:
        return s
    ev = s.events.copy()
    ev["x"] //= fx
    ev["y"] //= fy
    return EventStream(math.ceil(s.width / fx), math.ceil(s.height / fy), s.duration, ev)


def crop_temporal(s: EventStream, t0: int, t1: int) -> EventStream:
    """Keep events in ``[t0, t1)`` (µs) and shift time to start at 0."""
    if not 0 <= t0 < t1 <= s.duration:
        raise StructuralError(f"invalid window [{t0}, {t1}) for duration {s.duration}")
    t = s.events["t"]
    lo, hi = np.searchsorted(t, t0, "left"), np.searchsorted(t, t1, "left")
    ev = s.events[lo:hi].copy()
    ev["t"] -= np.uint32(t0)
    return EventStream(s.width, s.height, t1 - t0, ev)


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Per-bin event counts, ``frames[t, polarity, y, x]``."""

    frames: np.ndarray
    bin_ms: float

    @property
    def steps(self) -> int:
        return self.frames.shape[0]


def rasterize(s: EventStream, bin_ms: float, binarize: bool = False,
              dtype=np.float64) -> FrameSequence:
    if not bin_ms > 0:
        raise StructuralError("bin width must be positive")
    bin_us = bin_ms * 1000.0
    steps = math.ceil(s.duration / bin_us)
    frames = np.zeros((steps, 2, s.height, s.width), dtype=dtype)
    ev = s.events
    if len(ev):
        k = (ev["t"].astype(np.float64) // bin_us).astype(np.int64)
        np.add.at(frames, (k, ev["p"].astype(np.int64), ev["y"].astype(np.int64),
                           ev["x"].astype(np.int64)), 1)
    if binarize:
        frames = (frames > 0).astype(dtype)
    return FrameSequence(frames, float(bin_ms))
