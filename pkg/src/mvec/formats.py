"""fvecs/ivecs and attribute-JSONL readers and writers.

Both vector formats are the classic ANN-benchmark interchange: repeated
records of [int32 little-endian d][d x element], element float32 for fvecs
and int32 for ivecs. Every record must carry the same d. Readers stream;
malformed records are reported with their byte offset.
"""

from __future__ import annotations

import json
import struct
from typing import Iterator

import numpy as np


class FormatError(ValueError):
    """Malformed input file; message includes the byte offset when known."""


def _iter_vecs(path: str, dtype: np.dtype, batch_rows: int) -> Iterator[np.ndarray]:
    with open(path, "rb") as f:
        offset = 0
        dim: int | None = None
        rows: list[np.ndarray] = []
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) < 4:
                raise FormatError(f"{path}: truncated record header at byte {offset}")
            (d,) = struct.unpack("<i", head)
            if d <= 0:
                raise FormatError(f"{path}: bad dimension {d} at byte {offset}")
            if dim is None:
                dim = d
            elif d != dim:
                raise FormatError(f"{path}: dimension changed from {dim} to {d} at byte {offset}")
            body = f.read(4 * d)
            if len(body) < 4 * d:
                raise FormatError(f"{path}: truncated record body at byte {offset}")
            rows.append(np.frombuffer(body, dtype=dtype))
            offset += 4 + 4 * d
            if len(rows) >= batch_rows:
                yield np.vstack(rows)
                rows = []
        if rows:
            yield np.vstack(rows)


def iter_fvecs(path: str, batch_rows: int = 1024) -> Iterator[np.ndarray]:
    """Yield float32 row blocks without loading the whole file."""
    yield from _iter_vecs(path, np.dtype("<f4"), batch_rows)


def iter_ivecs(path: str, batch_rows: int = 1024) -> Iterator[np.ndarray]:
    yield from _iter_vecs(path, np.dtype("<i4"), batch_rows)


def read_fvecs(path: str) -> np.ndarray:
    blocks = list(iter_fvecs(path))
    if not blocks:
        return np.empty((0, 0), dtype=np.float32)
    return np.vstack(blocks)


def read_ivecs(path: str) -> np.ndarray:
    blocks = list(iter_ivecs(path))
    if not blocks:
        return np.empty((0, 0), dtype=np.int32)
    return np.vstack(blocks)


def write_fvecs(path: str, x: np.ndarray) -> None:
    m = np.ascontiguousarray(x, dtype="<f4")
    _write_vecs(path, m)


def write_ivecs(path: str, x: np.ndarray) -> None:
    m = np.ascontiguousarray(x, dtype="<i4")
    _write_vecs(path, m)


def _write_vecs(path: str, m: np.ndarray) -> None:
    if m.ndim != 2:
        raise ValueError("expected a 2-d array of records")
    head = struct.pack("<i", m.shape[1])
    with open(path, "wb") as f:
        for row in m:
            f.write(head)
            f.write(row.tobytes())


def iter_attr_jsonl(path: str) -> Iterator[tuple[str, dict]]:
    """Yield (asset_id, values) from a JSON-lines attribute file.

    Each line is {"asset_id": str, "values": {column: value}}.
    """
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(row, dict) or "asset_id" not in row:
                raise FormatError(f"{path}:{lineno}: expected an object with 'asset_id'")
            values = row.get("values", {})
            if not isinstance(values, dict):
                raise FormatError(f"{path}:{lineno}: 'values' must be an object")
            yield str(row["asset_id"]), values
