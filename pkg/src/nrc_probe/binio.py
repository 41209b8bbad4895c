"""Binary container for float64 tensors: shape-prefixed, little-endian.

Layout per file:

    magic (8 bytes) | uint64 header_len | header JSON (utf-8, may be empty)
    | uint64 tensor_count | per tensor: uint64 ndim, uint64 dims..., float64 data

Datasets store an empty header and keep provenance in a JSON sidecar;
checkpoints embed their header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NRCBIN01"
_U64 = struct.Struct("<Q")


def write_container(path, arrays, header: dict | None = None) -> None:
    path = Path(path)
    header_bytes = json.dumps(header, sort_keys=True).encode() if header else b""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_U64.pack(len(header_bytes)))
        fh.write(header_bytes)
        fh.write(_U64.pack(len(arrays)))
        for a in arrays:
            a = np.ascontiguousarray(a, dtype="<f8")
            fh.write(_U64.pack(a.ndim))
            for d in a.shape:
                fh.write(_U64.pack(d))
            fh.write(a.tobytes())


def read_container(path) -> tuple[dict | None, list[np.ndarray]]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container (bad magic {magic!r})")
        (header_len,) = _U64.unpack(_read_exact(fh, 8, path))
        header = None
        if header_len:
            header = json.loads(_read_exact(fh, header_len, path).decode())
        (count,) = _U64.unpack(_read_exact(fh, 8, path))
        arrays = []
        for _ in range(count):
            (ndim,) = _U64.unpack(_read_exact(fh, 8, path))
            shape = tuple(
                _U64.unpack(_read_exact(fh, 8, path))[0] for _ in range(ndim)
            )
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, 8 * n_items, path)
            arrays.append(np.frombuffer(raw, dtype="<f8").reshape(shape).copy())
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")
    return header, arrays


def _read_exact(fh, n: int, path) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise ValueError(f"{path}: truncated container (wanted {n} bytes)")
    return raw
