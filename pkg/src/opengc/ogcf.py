"""Binary dense-matrix container used for features, embeddings, and
condensed outputs.

Layout: 16-byte header (magic ``OGCF``, u32 rows, u32 cols, u32 reserved,
all little-endian) followed by row-major little-endian float32 data.
Matrices are promoted to float64 when read.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"OGCF"
_HEADER = struct.Struct("<4sIII")


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a 2-D real matrix; data is stored as float32."""
    m = np.ascontiguousarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected 2-D matrix, got shape {m.shape}")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, rows, cols, 0))
        fh.write(m.astype("<f4").tobytes(order="C"))


def read_matrix(path: str | Path) -> np.ndarray:
    """Read a matrix written by :func:`write_matrix`; returns float64."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"matrix file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"truncated matrix file: {path}")
    magic, rows, cols, _reserved = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"bad magic {magic!r} in {path}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise DataError(
            f"size mismatch in {path}: header says {rows}x{cols} "
            f"({expected} bytes), file has {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)
