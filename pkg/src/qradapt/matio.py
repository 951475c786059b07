"""Matrix file container shared repo-wide, plus a CSV import for hand-made fixtures.

Binary layout (all integers little-endian):

    bytes 0..3    magic  b"QRLA"
    bytes 4..7    u32    format version (currently 1)
    bytes 8..15   u64    rows
    bytes 16..23  u64    cols
    bytes 24..    f64    rows*cols values, little-endian, row-major

CSV files are one matrix row per line, comma-separated decimals.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .linalg import as_matrix

MAGIC = b"QRLA"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


class MatrixFormatError(ValueError):
    """The file is not a valid matrix container or CSV matrix."""


def pack_matrix(w) -> bytes:
    a = as_matrix(w)
    rows, cols = a.shape
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def unpack_matrix(buf: bytes, offset: int = 0, where: str = "buffer") -> tuple[np.ndarray, int]:
    """Read one container block from ``buf``; returns (matrix, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise MatrixFormatError(f"{where}: truncated header ({len(buf) - offset} bytes)")
    magic, version, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise MatrixFormatError(f"{where}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise MatrixFormatError(f"{where}: unsupported container version {version}")
    if rows < 1 or cols < 1:
        raise MatrixFormatError(f"{where}: invalid shape {rows}x{cols}")
    end = offset + _HEADER.size + 8 * rows * cols
    if len(buf) < end:
        raise MatrixFormatError(f"{where}: payload truncated, expected {end - offset} bytes")
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset + _HEADER.size)
    return as_matrix(data.astype(np.float64).reshape(rows, cols), name=where), end


def save_matrix(path, w) -> None:
    Path(path).write_bytes(pack_matrix(w))


def load_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    a, end = unpack_matrix(raw, where=str(path))
    if end != len(raw):
        raise MatrixFormatError(f"{path}: payload size mismatch, expected {end} bytes, got {len(raw)}")
    return a


def load_matrix_csv(path) -> np.ndarray:
    try:
        a = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise MatrixFormatError(f"{path}: not a valid CSV matrix ({exc})") from exc
    if a.size == 0:
        raise MatrixFormatError(f"{path}: empty CSV matrix")
    return as_matrix(a, name=str(path))


def load_matrix_any(path) -> np.ndarray:
    """Load either format, sniffing the binary magic first."""
    with open(path, "rb") as f:
        head = f.read(len(MAGIC))
    if head == MAGIC:
        return load_matrix(path)
    return load_matrix_csv(path)
