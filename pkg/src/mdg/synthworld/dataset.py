"""Binary dataset files.

Layout (little-endian)::

    b"MDGDATA1"
    u32 version
    u64 generator seed
    u32 scenario count
    u64 offset[count]          absolute byte offset of each record
    record*                    u32 payload length, u32 crc32(payload), payload

A payload holds, in order: i64 scenario_id, u32 kind length + utf-8 kind,
f64 dt, i64 ego, then the arrays map_polylines, lights, history, future,
types, extents, routes. Each array is u8 dtype code (0 = f8, 1 = i8),
u32 rank, u64 extents, raw values.
"""
from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np

from mdg.errors import DataError
from mdg.synthworld.scenario import ARRAY_FIELDS, Scenario

MAGIC = b"MDGDATA1"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}


def _pack_array(buf: io.BytesIO, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a)
    dt = a.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise DataError(f"unsupported dtype {a.dtype}")
    buf.write(struct.pack("<BI", _CODES[dt], a.ndim))
    buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
    buf.write(a.astype(dt).tobytes())


def _pack(sc: Scenario) -> bytes:
    buf = io.BytesIO()
    kind = sc.kind.encode()
    buf.write(struct.pack("<qI", sc.scenario_id, len(kind)))
    buf.write(kind)
    buf.write(struct.pack("<dq", sc.dt, sc.ego))
    for name in ARRAY_FIELDS:
        _pack_array(buf, getattr(sc, name))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, where: str):
        self.data = data
        self.pos = 0
        self.where = where

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"truncated {self.where}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> np.ndarray:
        code, rank = self.unpack("<BI")
        if code not in _DTYPES:
            raise DataError(f"unknown dtype code {code} in {self.where}")
        shape = self.unpack(f"<{rank}Q")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        return np.frombuffer(self.take(n), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def _unpack(payload: bytes, i: int) -> Scenario:
    r = _Reader(payload, f"record {i}")
    sid, klen = r.unpack("<qI")
    kind = r.take(klen).decode()
    dt, ego = r.unpack("<dq")
    arrays = {name: r.array() for name in ARRAY_FIELDS}
    if r.pos != len(payload):
        raise DataError(f"record {i} has {len(payload) - r.pos} unread bytes")
    return Scenario(scenario_id=sid, kind=kind, dt=dt, ego=ego, **arrays)


def dumps_dataset(scenarios, seed: int = 0) -> bytes:
    records = []
    for sc in scenarios:
        payload = _pack(sc)
        records.append(struct.pack("<II", len(payload), zlib.crc32(payload)) + payload)
    n = len(records)
    header_len = len(MAGIC) + 4 + 8 + 4 + 8 * n
    offsets, pos = [], header_len
    for rec in records:
        offsets.append(pos)
        pos += len(rec)
    head = MAGIC + struct.pack("<IQI", VERSION, seed, n) + struct.pack(f"<{n}Q", *offsets)
    return head + b"".join(records)


def loads_dataset(data: bytes) -> tuple[list[Scenario], int]:
    """Parse a dataset; returns (scenarios, generator seed)."""
    r = _Reader(data, "dataset header")
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError("not an MDG dataset (bad magic)")
    version, seed, count = r.unpack("<IQI")
    if version != VERSION:
        raise DataError(f"dataset version {version} is not supported (expected {VERSION})")
    offsets = r.unpack(f"<{count}Q")
    if any(b <= a for a, b in zip(offsets, offsets[1:])):
        raise DataError("manifest offsets are not strictly increasing")
    out = []
    for i, off in enumerate(offsets):
        if off != r.pos:
            raise DataError(f"record {i} starts at byte {r.pos}, manifest says {off}")
        length, crc = r.unpack("<II")
        r.where = f"record {i}"
        payload = r.take(length)
        if zlib.crc32(payload) != crc:
            raise DataError(f"checksum mismatch in record {i}")
        out.append(_unpack(payload, i))
    if r.pos != len(data):
        extra = _count_trailing_records(data, r.pos)
        raise DataError(f"manifest lists {count} scenarios but the file holds {count + extra}"
                        if extra else f"{len(data) - r.pos} trailing bytes after the last record")
    return out, seed


def _count_trailing_records(data: bytes, pos: int) -> int:
    n = 0
    while pos + 8 <= len(data):
        length, _ = struct.unpack_from("<II", data, pos)
        pos += 8 + length
        if pos > len(data):
            return n
        n += 1
    return n if pos == len(data) else 0


def save_dataset(scenarios, path, seed: int = 0) -> None:
    data = dumps_dataset(scenarios, seed)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_dataset(path) -> list[Scenario]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    return loads_dataset(data)[0]


def dataset_seed(path) -> int:
    return loads_dataset(Path(path).read_bytes())[1]
