"""Named-tensor archive: a small binary container for checkpoints and feature caches.

Layout (little-endian)::

    b"SELDCKPT" | u32 version | u32 count |
    count * ( u16 name_len | name utf-8 | u8 dtype | u8 rank | rank * u32 dims | f64 payload )
"""
from __future__ import annotations

import io
import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"SELDCKPT"
VERSION = 1
DTYPE_F64 = 0


class ArchiveError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ArchiveError(f"rank {arr.ndim} too large for {name}")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_F64, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise ArchiveError("bad magic; not a SELDCKPT archive")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise ArchiveError("truncated archive")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        dtype, rank = take("<BB")
        if dtype != DTYPE_F64:
            raise ArchiveError(f"{name}: unsupported dtype code {dtype}")
        dims = take(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        nbytes = 8 * n
        if pos + nbytes > len(view):
            raise ArchiveError(f"{name}: truncated payload")
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").reshape(dims).astype(np.float64)
        pos += nbytes
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes after last tensor")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return loads(fh.read())
