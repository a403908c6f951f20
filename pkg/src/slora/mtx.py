"""MTX1 binary tensor files.

Layout: 4 magic bytes ``MTX1``, u32 little-endian row count, u32
little-endian column count, then rows * cols IEEE-754 little-endian
float64 values in row-major order. Nothing else; a valid file is
exactly 12 + 8 * rows * cols bytes long.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .linalg import Matrix, as_matrix

MAGIC = b"MTX1"
_HEADER = struct.Struct("<4sII")


class MtxFormatError(ValueError):
    """Malformed, truncated, or inconsistent MTX1 payload."""


def write_mtx(path, m: Matrix) -> None:
    """Write a matrix to an MTX1 file (row-major little-endian float64)."""
    m = as_matrix(m, f"tensor for {path}")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_mtx(path) -> Matrix:
    """Read and validate an MTX1 file."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise MtxFormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic, rows, cols = _HEADER.unpack(header)
        if magic != MAGIC:
            raise MtxFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if rows < 1 or cols < 1:
            raise MtxFormatError(f"{path}: invalid dims {rows}x{cols}")
        expected = 8 * rows * cols
        payload = fh.read(expected + 1)
    if len(payload) < expected:
        raise MtxFormatError(
            f"{path}: truncated payload, expected {expected} bytes for "
            f"{rows}x{cols}, got {len(payload)}"
        )
    if len(payload) > expected:
        raise MtxFormatError(f"{path}: trailing bytes after {rows}x{cols} payload")
    values = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
    m = np.ascontiguousarray(values, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise MtxFormatError(f"{path}: non-finite values in payload")
    return m


def mtx_path(directory, name: str) -> str:
    return os.path.join(directory, name + ".mtx")
