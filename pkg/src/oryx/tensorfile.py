"""Little-endian binary tensor container.

Layout::

    magic    8 bytes  b"ORYXTNSR"
    version  u32
    dtype    u8       0 = float32, 1 = float64
    ndim     u8
    dims     u32[ndim]
    payload  row-major, product(dims) * itemsize bytes
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"ORYXTNSR"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class TensorFormatError(IntegrityError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})", offset=offset)


def to_bytes(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in CODES:
        raise TypeError(f"unsupported dtype {a.dtype}; use float32 or float64")
    if a.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<IBB", VERSION, CODES[a.dtype], a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=DTYPES[CODES[a.dtype]]).tobytes()


def from_bytes(data: bytes) -> np.ndarray:
    for i, b in enumerate(MAGIC):
        if i >= len(data) or data[i] != b:
            raise TensorFormatError("bad magic", i)
    pos = len(MAGIC)
    if len(data) < pos + 6:
        raise TensorFormatError("truncated header", len(data))
    version, code, ndim = struct.unpack_from("<IBB", data, pos)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", pos)
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}", pos + 4)
    pos += 6
    if len(data) < pos + 4 * ndim:
        raise TensorFormatError(f"truncated dims: need {ndim} u32 values", len(data))
    dims = struct.unpack_from(f"<{ndim}I", data, pos)
    pos += 4 * ndim
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    have = len(data) - pos
    if have < expected:
        raise TensorFormatError(f"payload truncated: expected {expected} bytes, found {have}", len(data))
    if have > expected:
        raise TensorFormatError(f"{have - expected} trailing bytes after payload", pos + expected)
    return np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize, offset=pos).reshape(dims).copy()


def write(path: str | Path, array) -> None:
    Path(path).write_bytes(to_bytes(array))


def read(path: str | Path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
