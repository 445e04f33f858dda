"""Checkpoint files: the initialisation, ADAM state and a model hash.

Layout (little-endian)::

    0   4s   magic b"SMCK"
    4   u16  version (1)
    6   u16  array count
    8   64s  model hash, ASCII hex
    72  u64  ADAM step count
    80  3f8  ADAM b1, b2, eps
    104 arrays: u16 name length, name (UTF-8), u8 dtype code, u8 ndim,
        ndim x u32 dims, raw element bytes

Array names are ``param/<key>``, ``adam.m/<key>`` and ``adam.v/<key>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..autodiff import Node
from ..errors import ConfigError, FormatError
from ..meta import AdamState

MAGIC = b"SMCK"
VERSION = 1
HEADER = struct.Struct("<4sHH64sQ3d")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    params: dict  # key -> Node
    adam: AdamState
    model_hash: str


def encode(ckpt: Checkpoint) -> bytes:
    arrays = [(f"param/{k}", p.value) for k, p in ckpt.params.items()]
    arrays += [(f"adam.m/{k}", v) for k, v in ckpt.adam.m.items()]
    arrays += [(f"adam.v/{k}", v) for k, v in ckpt.adam.v.items()]
    h = ckpt.model_hash.encode("ascii")
    if len(h) != 64:
        raise ValueError("model hash must be 64 hex characters")
    out = [HEADER.pack(MAGIC, VERSION, len(arrays), h, ckpt.adam.t, ckpt.adam.b1, ckpt.adam.b2, ckpt.adam.eps)]
    for name, arr in arrays:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _CODES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}", offset=self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic, version, count, h, t, b1, b2, eps = r.unpack(HEADER.format, "header")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    params, m, v = {}, {}, {}
    for _ in range(count):
        start = r.pos
        (n,) = r.unpack("<H", "array name length")
        name = r.take(n, "array name").decode("utf-8", errors="replace")
        code, ndim = r.unpack("<BB", "array header")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code}", offset=r.pos - 2)
        shape = r.unpack(f"<{ndim}I", "array shape")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size, f"array {name}"), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        kind, _, key = name.partition("/")
        target = {"param": params, "adam.m": m, "adam.v": v}.get(kind)
        if target is None or not key:
            raise FormatError(f"unknown array {name!r}", offset=start)
        target[key] = arr
    if r.pos != len(data):
        raise FormatError("trailing bytes after the last array", offset=r.pos)
    if set(m) != set(params) or set(v) != set(params):
        raise FormatError("ADAM state does not cover the parameters", offset=HEADER.size)
    nodes = {k: Node(a, requires_grad=True) for k, a in params.items()}
    return Checkpoint(nodes, AdamState(m, v, int(t), b1, b2, eps), h.decode("ascii"))


def save_checkpoint(path, params: dict, adam: AdamState, model_hash: str) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(Checkpoint(params, adam, model_hash)))


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    """Read a checkpoint; a model hash other than ``expected_hash`` is refused
    unless ``force``."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    ckpt = decode(data)
    if expected_hash is not None and ckpt.model_hash != expected_hash and not force:
        raise ConfigError(
            f"checkpoint {path} was written for a different network/neuron/ways configuration "
            f"(hash {ckpt.model_hash[:12]}..., config {expected_hash[:12]}...); pass --force to load anyway")
    return ckpt
