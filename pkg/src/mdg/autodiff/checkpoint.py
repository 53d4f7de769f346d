"""Flat binary container of named float64 tensors.

Layout (all integers little-endian)::

    b"MDGCKPT1"
    u32 metadata length, metadata bytes (UTF-8 key=value lines, may be empty)
    u32 entry count
    per entry: u32 name length, name bytes, u32 rank, rank x u64 extents,
               prod(extents) x f64 values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from mdg.errors import DataError

MAGIC = b"MDGCKPT1"


def dumps_tensors(tensors: dict[str, np.ndarray], metadata: str = "") -> bytes:
    meta = metadata.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], str]:
    if blob[:8] != MAGIC:
        raise DataError("not a checkpoint: bad magic")
    pos = 8

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise DataError("checkpoint truncated")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    (meta_len,) = read("<I")
    if pos + meta_len > len(blob):
        raise DataError("checkpoint truncated")
    metadata = blob[pos:pos + meta_len].decode("utf-8")
    pos += meta_len
    (count,) = read("<I")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = read("<I")
        if pos + name_len > len(blob):
            raise DataError("checkpoint truncated")
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        shape = read(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(blob):
            raise DataError("checkpoint truncated")
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise DataError(f"checkpoint has {len(blob) - pos} trailing bytes")
    return out, metadata


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: str = "") -> None:
    Path(path).write_bytes(dumps_tensors(tensors, metadata))


def load_tensors(path) -> tuple[dict[str, np.ndarray], str]:
    return loads_tensors(Path(path).read_bytes())
