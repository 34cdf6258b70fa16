"""KVQ1 binary container for fp32 matrices, int8 matrices and quantized caches.

Layout (little-endian)::

    0..3   magic b"KVQ1"
    4      dtype code: 0 fp32 matrix, 1 int8 matrix, 2 quantized cache
    5..8   rows (u32)
    9..12  cols (u32)
    13..   row-major payload; dtype 2 appends cols float32 scales
"""

from __future__ import annotations

import os
import struct
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError
from .tensor import Fp32Matrix, Int8Matrix, QuantizedCache, ScaleVector

MAGIC = b"KVQ1"
HEADER = struct.Struct("<4sBII")
HEADER_SIZE = HEADER.size  # 13

DTYPE_FP32 = 0
DTYPE_INT8 = 1
DTYPE_CACHE = 2

DTYPE_NAMES = {DTYPE_FP32: "fp32 matrix", DTYPE_INT8: "int8 matrix", DTYPE_CACHE: "quantized cache"}

KVQObject = Union[Fp32Matrix, Int8Matrix, QuantizedCache]
PathLike = Union[str, os.PathLike]

_U32_MAX = 0xFFFFFFFF


def _chunks(obj: KVQObject) -> tuple[int, int, int, list]:
    if isinstance(obj, Fp32Matrix):
        return DTYPE_FP32, obj.rows, obj.cols, [obj.data.astype("<f4", copy=False)]
    if isinstance(obj, Int8Matrix):
        return DTYPE_INT8, obj.rows, obj.cols, [obj.data]
    if isinstance(obj, QuantizedCache):
        return (
            DTYPE_CACHE,
            obj.q.rows,
            obj.q.cols,
            [obj.q.data, obj.scales.scales.astype("<f4", copy=False)],
        )
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def payload_size(dtype: int, rows: int, cols: int) -> int:
    if dtype == DTYPE_FP32:
        return rows * cols * 4
    if dtype == DTYPE_INT8:
        return rows * cols
    if dtype == DTYPE_CACHE:
        return rows * cols + cols * 4
    raise FormatError("dtype", f"unknown dtype code {dtype}")


def _header(dtype: int, rows: int, cols: int) -> bytes:
    if rows > _U32_MAX or cols > _U32_MAX:
        raise FormatError("rows" if rows > _U32_MAX else "cols", "dimension exceeds u32")
    return HEADER.pack(MAGIC, dtype, rows, cols)


def serialize(obj: KVQObject) -> bytes:
    """Encode ``obj`` as a KVQ1 byte string."""
    dtype, rows, cols, parts = _chunks(obj)
    return _header(dtype, rows, cols) + b"".join(p.tobytes() for p in parts)


def write_file(obj: KVQObject, dest: Union[PathLike, BinaryIO]) -> int:
    """Write ``obj`` to a path or binary file object; return bytes written."""
    dtype, rows, cols, parts = _chunks(obj)
    header = _header(dtype, rows, cols)
    if hasattr(dest, "write"):
        return _write_parts(dest, header, parts)
    with open(dest, "wb") as fh:
        return _write_parts(fh, header, parts)


def _write_parts(fh: BinaryIO, header: bytes, parts: list) -> int:
    n = fh.write(header)
    for part in parts:
        n += fh.write(memoryview(np.ascontiguousarray(part)).cast("B"))
    return n


def parse_header(buf) -> tuple[int, int, int]:
    """Validate the 13-byte header and return ``(dtype, rows, cols)``."""
    if len(buf) < HEADER_SIZE:
        if len(buf) < 4 or bytes(buf[:4]) != MAGIC:
            raise FormatError("magic", "stream shorter than header")
        raise FormatError("header", f"truncated: {len(buf)} of {HEADER_SIZE} bytes")
    magic, dtype, rows, cols = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, found {magic!r}")
    if dtype not in DTYPE_NAMES:
        raise FormatError("dtype", f"unknown dtype code {dtype}")
    if rows < 1:
        raise FormatError("rows", "must be >= 1")
    if cols < 1:
        raise FormatError("cols", "must be >= 1")
    return dtype, rows, cols


def deserialize(buf) -> KVQObject:
    """Decode a KVQ1 byte string (``bytes``, ``bytearray`` or ``memoryview``)."""
    buf = memoryview(buf).cast("B")
    dtype, rows, cols = parse_header(buf)
    need = payload_size(dtype, rows, cols)
    have = len(buf) - HEADER_SIZE
    if have < need:
        raise FormatError("payload", f"truncated: {have} of {need} bytes")
    if have > need:
        raise FormatError("payload", f"{have - need} trailing bytes after payload")
    body = buf[HEADER_SIZE:]
    n = rows * cols
    if dtype == DTYPE_FP32:
        data = np.frombuffer(body, dtype="<f4", count=n).reshape(rows, cols)
        return _fp32(data, "payload")
    q = np.frombuffer(body, dtype=np.int8, count=n).reshape(rows, cols)
    if q.min() < -127:
        t, d = np.unravel_index(int(np.argmin(q)), q.shape)
        raise FormatError("payload", f"int8 value -128 at ({t}, {d})")
    q = Int8Matrix(q)
    if dtype == DTYPE_INT8:
        return q
    scales = np.frombuffer(body, dtype="<f4", count=cols, offset=n)
    if not np.isfinite(scales).all():
        raise FormatError("scales", f"non-finite scale at column {int(np.argmin(np.isfinite(scales)))}")
    if (scales < 0).any():
        raise FormatError("scales", f"negative scale at column {int(np.argmax(scales < 0))}")
    return QuantizedCache(q, ScaleVector(scales.astype(np.float32)))


def _fp32(data: np.ndarray, field: str) -> Fp32Matrix:
    try:
        return Fp32Matrix(data)
    except ValueError as exc:
        raise FormatError(field, str(exc)) from None


def read_file(src: Union[PathLike, BinaryIO]) -> KVQObject:
    """Read and decode a KVQ1 file."""
    if hasattr(src, "read"):
        return deserialize(src.read())
    with open(src, "rb") as fh:
        return deserialize(fh.read())
