"""Tensor dump: a little-endian binary file plus a readable text form.

Binary layout::

    magic  b"SLTD"   4 bytes
    version          u32
    count            u32
    count records:   rank u32, ndim u32, dims u64 * ndim, dtype tag u8 (4 = f32, 8 = f64), data
"""
from __future__ import annotations

import struct
from typing import Sequence

import numpy as np

MAGIC = b"SLTD"
VERSION = 1
_TAGS = {np.dtype("float32"): 4, np.dtype("float64"): 8}
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def dump_tensors(tensors: Sequence[tuple[int, np.ndarray]]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for rank, arr in tensors:
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise ValueError(f"cannot dump dtype {arr.dtype}")
        out += struct.pack("<II", rank, arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += struct.pack("<B", tag)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    return bytes(out)


def load_tensors(blob: bytes) -> list[tuple[int, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise ValueError("not a tensor dump (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported tensor dump version {version}")
    pos = 12
    out = []
    for _ in range(count):
        rank, ndim = struct.unpack_from("<II", blob, pos)
        pos += 8
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        (tag,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += n * dt.itemsize
        out.append((rank, arr))
    return out


def format_tensors(tensors: Sequence[tuple[int, np.ndarray]], names: Sequence[str] | None = None) -> str:
    lines = [f"# tensor dump v{VERSION}"]
    for i, (rank, arr) in enumerate(tensors):
        name = names[i] if names else f"out{i}"
        tag = "f64" if arr.dtype == np.float64 else "f32"
        lines.append(f"{name} rank={rank} shape={list(arr.shape)} dtype={tag}")
        lines.append(" ".join(repr(float(v)) for v in np.ravel(arr)))
    return "\n".join(lines) + "\n"
