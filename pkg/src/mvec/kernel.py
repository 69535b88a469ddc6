"""Distance metrics, batched distance blocks, and bounded top-K heaps.

Everything in here is shared by the exact, IVF, hybrid, and batch search
paths. Distances are computed in float64 regardless of the float32 storage
encoding so that every path reports the same value for the same row.
"""

from __future__ import annotations

import heapq
from enum import IntEnum

import numpy as np


class Metric(IntEnum):
    SQUARED_L2 = 0
    COSINE = 1

    @classmethod
    def from_name(cls, name: str) -> "Metric":
        try:
            return _METRIC_NAMES[name.lower()]
        except KeyError:
            raise ValueError(f"unknown metric {name!r}; expected 'l2' or 'cosine'") from None

    @property
    def tag_name(self) -> str:
        return "l2" if self is Metric.SQUARED_L2 else "cosine"


_METRIC_NAMES = {
    "l2": Metric.SQUARED_L2,
    "squaredl2": Metric.SQUARED_L2,
    "squared_l2": Metric.SQUARED_L2,
    "cosine": Metric.COSINE,
}


class ZeroVectorError(ValueError):
    """Cosine distance is undefined for an all-zero vector."""


def _as_matrix(x: np.ndarray) -> np.ndarray:
    m = np.ascontiguousarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a vector or a 2-d block, got shape {x.shape}")
    return m


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Return unit-norm float64 rows; raises ZeroVectorError on a zero row."""
    m = _as_matrix(x)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        raise ZeroVectorError("zero vector has no direction under the cosine metric")
    return m / norms[:, None]


def distance(a: np.ndarray, b: np.ndarray, metric: Metric) -> float:
    """Scalar distance between two vectors.

    SQUARED_L2 is the sum of squared coordinate differences (no square
    root; monotone in L2). COSINE is 1 - (a.b)/(|a||b|).
    """
    av = np.asarray(a, dtype=np.float64).reshape(-1)
    bv = np.asarray(b, dtype=np.float64).reshape(-1)
    if av.shape != bv.shape:
        raise ValueError(f"dimension mismatch: {av.shape[0]} vs {bv.shape[0]}")
    if metric == Metric.SQUARED_L2:
        d = av - bv
        return float(np.dot(d, d))
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("zero vector has no direction under the cosine metric")
    return float(1.0 - np.dot(av, bv) / (na * nb))


def batched_distances(queries: np.ndarray, vectors: np.ndarray, metric: Metric) -> np.ndarray:
    """m x b block of distances between every query row and every vector row.

    The squared-L2 path uses the norm expansion ||q||^2 + ||v||^2 - 2 q.v
    so the whole block is one matrix product; tiny negative residues from
    cancellation are clamped to zero.
    """
    q = _as_matrix(queries)
    v = _as_matrix(vectors)
    if q.shape[1] != v.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {v.shape[1]}")
    if metric == Metric.SQUARED_L2:
        qn = np.einsum("ij,ij->i", q, q)
        vn = np.einsum("ij,ij->i", v, v)
        out = qn[:, None] + vn[None, :] - 2.0 * (q @ v.T)
        np.maximum(out, 0.0, out=out)
        return out
    return 1.0 - normalize_rows(q) @ normalize_rows(v).T


class TopKHeap:
    """Bounded max-heap keeping the K smallest (distance, vector_id) items.

    Ties on distance are broken toward the smaller vector_id, which is the
    ordering every result set in the engine uses.
    """

    __slots__ = ("capacity", "_heap")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        # entries are (-distance, -vector_id, asset_id): the heapq root is
        # then the largest (distance, vector_id), i.e. the eviction victim.
        self._heap: list[tuple[float, int, str]] = []

    def __len__(self) -> int:
        return len(self._heap)

    def bound(self) -> tuple[float, int] | None:
        """Current eviction threshold as (distance, vector_id), or None if not full."""
        if len(self._heap) < self.capacity:
            return None
        d, nid, _ = self._heap[0]
        return (-d, -nid)

    def offer(self, dist: float, vector_id: int, asset_id: str) -> bool:
        entry = (-dist, -vector_id, asset_id)
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, entry)
            return True
        if entry > self._heap[0]:
            heapq.heapreplace(self._heap, entry)
            return True
        return False

    def items(self) -> list[tuple[float, int, str]]:
        """Unordered (distance, vector_id, asset_id) contents."""
        return [(-d, -nid, a) for d, nid, a in self._heap]


def merge_heaps(heaps: list[TopKHeap], k: int) -> list[tuple[float, int, str]]:
    """Global K smallest across per-worker heaps, ascending (distance, vector_id).

    The result is a pure function of the union of heap contents, so it does
    not depend on how the candidate stream was split among workers.
    """
    merged: list[tuple[float, int, str]] = []
    for h in heaps:
        merged.extend(h.items())
    merged.sort(key=lambda e: (e[0], e[1]))
    return merged[:k]
