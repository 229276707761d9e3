"""Flat binary tensor files.

Layout (little-endian)::

    bytes 0-3    magic b"KNT4"
    byte  4      dtype code (1 = float32, 2 = float64, 3 = uint8, 4 = uint16, 5 = int64)
    byte  5      rank (1-4)
    bytes 6-7    reserved, zero
    bytes 8-23   four u32 dims; unused trailing dims are 1
    bytes 24-    raw element data, C order
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"KNT4"
HEADER = struct.Struct("<4sBBxx4I")
_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<u2"): 4,
    np.dtype("<i8"): 5,
}
_DTYPES = {v: k for k, v in _CODES.items()}


class FormatError(ValueError):
    pass


def to_bytes(array) -> bytes:
    a = np.asarray(array)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    code = _CODES.get(np.dtype(dt))
    if code is None:
        raise FormatError(f"unsupported dtype {a.dtype}")
    if not 1 <= a.ndim <= 4:
        raise FormatError(f"rank must be 1-4, got {a.ndim}")
    dims = list(a.shape) + [1] * (4 - a.ndim)
    return HEADER.pack(MAGIC, code, a.ndim, *dims) + np.ascontiguousarray(a, dtype=dt).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise FormatError("truncated header")
    magic, code, rank, *dims = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code not in _DTYPES or not 1 <= rank <= 4:
        raise FormatError("bad dtype code or rank")
    dtype = _DTYPES[code]
    shape = tuple(dims[:rank])
    count = int(np.prod(shape))
    payload = buf[HEADER.size:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"payload is {len(payload)} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
