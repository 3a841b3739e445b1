"""On-disk formats shared by every pipeline stage.

Matrix file layout (little-endian)::

    b"BXMAT1\\0"            7-byte magic
    u64 rows, u64 cols
    rows * cols float32     row-major

JSON artifacts are written with sorted keys and a trailing newline so that
re-saving an unchanged object reproduces identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

MATRIX_MAGIC = b"BXMAT1\x00"
_HEADER = struct.Struct("<QQ")
_HEADER_END = len(MATRIX_MAGIC) + _HEADER.size

# Refuse headers that would ask for more than 2**40 elements.
MAX_ELEMENTS = 1 << 40


class MatrixFormatError(ValueError):
    """Raised when a matrix file cannot be decoded."""


def matrix_to_bytes(matrix: np.ndarray) -> bytes:
    arr = np.asarray(matrix)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    rows, cols = arr.shape
    body = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return MATRIX_MAGIC + _HEADER.pack(rows, cols) + body


def matrix_from_bytes(data: bytes) -> np.ndarray:
    n = len(MATRIX_MAGIC)
    if len(data) < n or data[:n] != MATRIX_MAGIC:
        raise MatrixFormatError("bad magic at offset 0")
    if len(data) < _HEADER_END:
        raise MatrixFormatError(f"truncated header at offset {len(data)} (need {_HEADER_END} bytes)")
    rows, cols = _HEADER.unpack_from(data, n)
    if rows and cols and rows > MAX_ELEMENTS // cols:
        raise MatrixFormatError(f"dimension overflow at offset {n}: {rows} x {cols}")
    expected = _HEADER_END + 4 * rows * cols
    if len(data) < expected:
        raise MatrixFormatError(f"truncated body at offset {len(data)} (expected {expected} bytes)")
    if len(data) > expected:
        raise MatrixFormatError(f"trailing bytes at offset {expected}")
    body = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=_HEADER_END)
    return body.reshape(rows, cols).astype(np.float64)


def save_matrix(path: str | os.PathLike, matrix: np.ndarray) -> None:
    write_bytes_atomic(Path(path), matrix_to_bytes(matrix))


def load_matrix(path: str | os.PathLike) -> np.ndarray:
    return matrix_from_bytes(Path(path).read_bytes())


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def write_bytes_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_json(path: str | os.PathLike, obj: Any) -> None:
    write_bytes_atomic(Path(path), canonical_json(obj).encode("utf-8"))


def load_json(path: str | os.PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))
