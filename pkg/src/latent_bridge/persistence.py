"""Bit-exact checkpoint container.

Layout (all integers little-endian)::

    b"LTBR" | u32 version=1 | u32 entry_count
    entry_count x ( u32 name_len | name utf-8 | u32 rank | rank x u64 dim | f64 payload )
    u32 meta_block_len | meta block:
        u32 pair_count | pair_count x ( u32 key_len | key | u32 value_len | value )

Every length is checked against the bytes that remain before anything is
allocated.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor
from .errors import BadMagic, CorruptEntry, LatentBridgeError, VersionUnsupported

MAGIC = b"LTBR"
VERSION = 1


class IoError(LatentBridgeError, OSError):
    pass


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(tensors: Mapping, metadata: Optional[Mapping] = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        arr = np.asarray(arr, dtype="<f8", order="C")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    meta = dict(metadata or {})
    block = [struct.pack("<I", len(meta))]
    for k, v in meta.items():
        block.append(_pack_str(str(k)))
        block.append(_pack_str(str(v)))
    block_bytes = b"".join(block)
    parts.append(struct.pack("<I", len(block_bytes)))
    parts.append(block_bytes)
    return b"".join(parts)


def save_checkpoint(path, tensors: Mapping, metadata: Optional[Mapping] = None) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("checkpoint entry names must be unique")
    payload = encode_checkpoint(tensors, metadata)
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n > len(self.raw) - self.pos:
            raise CorruptEntry(f"truncated {what}: need {n} bytes, {len(self.raw) - self.pos} left")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        n = self.u32(what)
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptEntry(f"{what} is not valid UTF-8") from exc


def decode_checkpoint(raw: bytes):
    if raw[:4] != MAGIC:
        raise BadMagic(f"not a checkpoint (magic {raw[:4]!r})")
    r = _Reader(raw)
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version} not supported")
    count = r.u32("entry count")
    tensors = {}
    for _ in range(count):
        name = r.string("entry name")
        if name in tensors:
            raise CorruptEntry(f"duplicate entry {name!r}")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, "dims"))
        size = 1
        for d in dims:
            size *= d
        data = r.take(8 * size, f"payload of {name!r}")
        tensors[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    block_len = r.u32("metadata length")
    block = _Reader(r.take(block_len, "metadata block"))
    metadata = {}
    for _ in range(block.u32("metadata count")):
        key = block.string("metadata key")
        metadata[key] = block.string("metadata value")
    if block.pos != len(block.raw) or r.pos != len(raw):
        raise CorruptEntry("trailing bytes after checkpoint")
    return tensors, metadata


def load_checkpoint(path):
    """Return ``(tensors, metadata)``; tensors are float64 ndarrays in file order."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(raw)
