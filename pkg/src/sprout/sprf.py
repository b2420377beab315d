"""SPRF feature dumps: ``b"SPRF" | u32 version | u32 N | u32 D | N*D float32``.

All integers and floats are little-endian; rows are stored row-major.
"""

import struct

import numpy as np

from sprout.errors import ArgumentError, FormatError
from sprout.imageio import atomic_write_bytes

MAGIC = b"SPRF"
VERSION = 1
HEADER = struct.Struct("<4sIII")


def encode(matrix) -> bytes:
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise ArgumentError(f"SPRF stores 2-D matrices, got shape {arr.shape}")
    n, d = arr.shape
    return HEADER.pack(MAGIC, VERSION, n, d) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(data: bytes) -> np.ndarray:
    if len(data) < HEADER.size:
        raise FormatError(f"SPRF file truncated in header ({len(data)} of {HEADER.size} bytes)")
    magic, version, n, d = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("not an SPRF feature file (bad magic)")
    if version != VERSION:
        raise FormatError(f"SPRF version mismatch: file has {version}, reader supports {VERSION}")
    expected = HEADER.size + 4 * n * d
    if len(data) != expected:
        raise FormatError(f"SPRF payload is {len(data)} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4", offset=HEADER.size).reshape(n, d).astype(np.float32)


def write_features(path, matrix) -> None:
    atomic_write_bytes(path, encode(matrix))


def read_features(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return decode(fh.read())
    except OSError as exc:
        raise FormatError(f"cannot read feature file {path}: {exc}") from exc
