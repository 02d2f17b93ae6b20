"""CSTT binary tensor format.

Layout: ``b"CSTT"``, version byte (1), dtype byte (1 = f32, 2 = f64), rank
byte, ``rank`` little-endian uint64 extents, then row-major little-endian data.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"CSTT"
VERSION = 1
_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype not in _CODES:
        raise FormatError(f"cannot encode dtype {array.dtype}")
    if array.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBB", VERSION, _CODES[array.dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    data = np.ascontiguousarray(array, dtype=_DTYPES[_CODES[array.dtype]])
    return header + data.tobytes()


def decode(buf: bytes, offset: int = 0, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    if len(buf) - offset < 7:
        raise FormatError(f"{source}: truncated header at offset {offset}")
    if buf[offset:offset + 4] != MAGIC:
        raise FormatError(f"{source}: bad magic {bytes(buf[offset:offset + 4])!r} at offset {offset}")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    pos = offset + 7
    if len(buf) - pos < 8 * rank:
        raise FormatError(f"{source}: truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"{source}: truncated data (need {nbytes} bytes, have {len(buf) - pos})")
    array = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
    return array.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    array, end = decode(buf, 0, source=str(path))
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes")
    return array
