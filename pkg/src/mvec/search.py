"""Exact and IVF-pruned nearest-neighbour search over one snapshot.

The exact path and the ANN path share the same partition/block scan code, so
``ann_search`` with nprobe >= k is the exact search by construction, not by
numeric coincidence. Every reported distance is computed from the stored
row; only candidate selection is approximate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from queue import Empty, SimpleQueue

import numpy as np

from .kernel import Metric, TopKHeap, merge_heaps, normalize_rows
from .storage import DELTA_PARTITION, Snapshot


@dataclass(frozen=True)
class SearchRequest:
    query: np.ndarray
    k: int = 10
    nprobe: int = 8

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.nprobe < 1:
            raise ValueError("nprobe must be >= 1")


@dataclass(frozen=True)
class SearchHit:
    asset_id: str
    vector_id: int
    distance: float


@dataclass
class ResultSet:
    hits: list[SearchHit] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.hits)

    def __iter__(self):
        return iter(self.hits)

    def vector_ids(self) -> list[int]:
        return [h.vector_id for h in self.hits]

    def as_tuples(self) -> list[tuple[float, int, str]]:
        return [(h.distance, h.vector_id, h.asset_id) for h in self.hits]


def _query_f64(snapshot: Snapshot, q: np.ndarray) -> tuple[np.ndarray, float]:
    qv = np.asarray(q, dtype=np.float64).reshape(-1)
    if qv.shape[0] != snapshot.dimension:
        raise ValueError(f"query dimension {qv.shape[0]} != store dimension {snapshot.dimension}")
    if snapshot.metric == Metric.COSINE:
        qv = normalize_rows(qv)[0]
    qn = float(np.dot(qv, qv))
    return qv, qn


def block_distances(
    q64: np.ndarray, qnorms: np.ndarray, block: np.ndarray, bnorms: np.ndarray, metric: Metric
) -> np.ndarray:
    """Distance block against a cached extent (precomputed squared norms).

    Stored rows under the cosine metric are unit vectors (normalized at
    ingest), so cosine distance reduces to 1 - q.v there.
    """
    if metric == Metric.SQUARED_L2:
        out = qnorms[:, None] + bnorms[None, :] - 2.0 * (q64 @ block.T)
        np.maximum(out, 0.0, out=out)
        return out
    return 1.0 - q64 @ block.T


def offer_block(
    heap: TopKHeap, dists: np.ndarray, ids: np.ndarray, assets: list[str], k: int
) -> None:
    """Offer one distance block to a heap, skipping rows that cannot enter.

    The accepted set is exactly what per-row offers would accept: rows beaten
    by the current (distance, vector_id) bound are dropped up front, and only
    a block's own top-K (with the whole tie group at the threshold) can ever
    survive, so everything else is skipped without changing the outcome.
    """
    bound = heap.bound()
    if bound is not None:
        bd, bvid = bound
        cand = np.flatnonzero((dists < bd) | ((dists == bd) & (ids < bvid)))
    elif len(dists) > k:
        thr = dists[np.argpartition(dists, k - 1)[:k]].max()
        cand = np.flatnonzero(dists <= thr)
    else:
        cand = np.arange(len(dists))
    for i in cand:
        heap.offer(float(dists[i]), int(ids[i]), assets[i])


def _scan_partitions(
    snapshot: Snapshot,
    q64: np.ndarray,
    qn: float,
    k: int,
    pids: list[int],
    workers: int | None,
    predicate_fn=None,
) -> list[tuple[float, int, str]]:
    """Scan the given partitions, one TopKHeap per worker, merge at the end.

    Workers pull partitions from a shared queue (dynamic scheduling), so the
    result is a function of the scanned multiset only, never of the split.
    """
    metric = snapshot.metric
    q2d = q64.reshape(1, -1)
    qns = np.array([qn])

    def scan(pid: int, heap: TopKHeap) -> None:
        for ids, assets, emb64, norms in snapshot.iter_blocks(pid):
            dists = block_distances(q2d, qns, emb64, norms, metric)[0]
            if predicate_fn is not None:
                keep = np.fromiter(
                    (predicate_fn(a) for a in assets), dtype=bool, count=len(assets)
                )
                if not keep.any():
                    continue
                idx = np.flatnonzero(keep)
                offer_block(
                    heap, dists[idx], ids[idx], [assets[i] for i in idx], k
                )
            else:
                offer_block(heap, dists, ids, assets, k)

    nworkers = workers if workers else snapshot.store.config.workers
    nworkers = max(1, min(nworkers, len(pids))) if pids else 1
    if nworkers <= 1:
        heap = TopKHeap(k)
        for pid in pids:
            scan(pid, heap)
        heaps = [heap]
    else:
        work: SimpleQueue[int] = SimpleQueue()
        for pid in pids:
            work.put(pid)

        def drain(heap: TopKHeap) -> None:
            while True:
                try:
                    pid = work.get_nowait()
                except Empty:
                    return
                scan(pid, heap)

        heaps = [TopKHeap(k) for _ in range(nworkers)]
        futures = [snapshot.store.executor().submit(drain, h) for h in heaps]
        for f in futures:
            f.result()
    return merge_heaps(heaps, k)


def _to_results(entries: list[tuple[float, int, str]]) -> ResultSet:
    return ResultSet([SearchHit(a, vid, d) for d, vid, a in entries])


def knn_exact(snapshot: Snapshot, q: np.ndarray, k: int, workers: int | None = None) -> ResultSet:
    """Exact top-K over every partition including the delta store."""
    q64, qn = _query_f64(snapshot, q)
    pids = snapshot.partition_ids()
    return _to_results(_scan_partitions(snapshot, q64, qn, k, pids, workers))


def find_nearest_centroids(snapshot: Snapshot, q: np.ndarray, n: int) -> list[int]:
    """The n partitions whose centroids are closest to q, ascending distance.

    Ties break toward the lower partition id. Raises if no index is built.
    """
    table = snapshot.centroid_f64()
    if table is None:
        raise ValueError("no index built (no centroids)")
    pids, cents, cnorms = table
    q64, qn = _query_f64(snapshot, q)
    dists = block_distances(q64.reshape(1, -1), np.array([qn]), cents, cnorms, snapshot.metric)[0]
    order = np.lexsort((pids, dists))
    return [int(pids[i]) for i in order[:n]]


def ann_search(
    snapshot: Snapshot,
    request: SearchRequest,
    workers: int | None = None,
    predicate_fn=None,
) -> ResultSet:
    """IVF search: scan the nprobe nearest partitions plus the delta store.

    Falls back to the exact scan when no index exists yet (a fresh store is
    all delta, so the "fallback" is simply a full scan of it).
    """
    if snapshot.centroid_f64() is None:
        q64, qn = _query_f64(snapshot, request.query)
        return _to_results(
            _scan_partitions(snapshot, q64, qn, request.k, snapshot.partition_ids(), workers, predicate_fn)
        )
    pids = find_nearest_centroids(snapshot, request.query, request.nprobe)
    pids.append(DELTA_PARTITION)
    q64, qn = _query_f64(snapshot, request.query)
    return _to_results(
        _scan_partitions(snapshot, q64, qn, request.k, pids, workers, predicate_fn)
    )


def recall_at_k(approx: ResultSet, exact: ResultSet, k: int) -> float:
    """|approx top-K ∩ exact top-K| / K, matched by vector_id."""
    a = set(approx.vector_ids()[:k])
    e = set(exact.vector_ids()[:k])
    return len(a & e) / k
