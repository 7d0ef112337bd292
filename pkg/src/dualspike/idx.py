"""Bit-exact reader/writer for IDX files (big-endian header, ubyte payload).

Layout: two zero bytes, a dtype code, a dimension count, then one big-endian
u32 per dimension, then the row-major payload. Only the unsigned-byte dtype
(0x08) is supported; that covers image, label and event corpora here.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_UBYTE = 0x08


class IdxFormatError(ValueError):
    """Malformed IDX file; message carries the byte offset of the problem."""


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated header at byte {len(data)} (need 4)")
    zero1, zero2, dtype, ndim = struct.unpack(">BBBB", data[:4])
    if zero1 or zero2:
        raise IdxFormatError(f"{path}: bad magic at byte 0 (leading bytes must be zero)")
    if dtype != _UBYTE:
        raise IdxFormatError(f"{path}: unsupported dtype 0x{dtype:02x} at byte 2")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension list at byte {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(data) != header_end + count:
        raise IdxFormatError(
            f"{path}: payload length mismatch at byte {header_end}: "
            f"expected {count} bytes for dims {dims}, found {len(data) - header_end}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header_end).reshape(dims).copy()


def write_idx(path, array: np.ndarray):
    array = np.ascontiguousarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"write_idx expects uint8 data, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError("too many dimensions for IDX header")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">BBBB", 0, 0, _UBYTE, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())
