"""Batched multi-query search: group queries by partition, scan once each.

With m queries at the same K and nprobe, per-query execution would scan hot
partitions up to m times. The batch planner computes every query's nearest
partitions from one m x k centroid distance block and inverts that into a
partition -> queries map (the delta store maps to all queries). Execution
scans each planned partition exactly once, computing sub-blocks of at most
64 queries by one extent of rows, and offers each distance row to its
query's own heap. Results are identical to per-query search up to float
ties; the per-query path orders scans differently but computes the same
distances in float64.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from queue import Empty, SimpleQueue

import numpy as np

from .kernel import Metric, TopKHeap, merge_heaps, normalize_rows
from .search import ResultSet, SearchHit, block_distances, offer_block
from .storage import DELTA_PARTITION, Snapshot, ValidationError

QUERY_SUBBLOCK = 64


@dataclass
class QueryBatch:
    """m queries sharing one K and one nprobe (mixed values are rejected)."""

    queries: np.ndarray
    k: int
    nprobe: int

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64)
        if self.queries.ndim != 2:
            raise ValidationError("queries must be a 2d array, one row per query")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.nprobe < 1:
            raise ValidationError("nprobe must be >= 1")

    @property
    def size(self) -> int:
        return int(self.queries.shape[0])


def plan_batch(snapshot: Snapshot, batch: QueryBatch) -> dict[int, list[int]]:
    """Partition id -> query indexes that must scan it.

    Nearest partitions per query come from a single (m x k) distance block
    against the centroid table; ties break toward the lower partition id.
    Every query maps to the delta store. Raises if no index is built.
    """
    table = snapshot.centroid_f64()
    if table is None:
        raise ValueError("no index built; batch search requires centroids")
    pids, cents, cnorms = table
    q = batch.queries
    if q.shape[1] != snapshot.dimension:
        raise ValueError(f"query dimension {q.shape[1]} != store dimension {snapshot.dimension}")
    if snapshot.metric == Metric.COSINE:
        q = normalize_rows(q)
    qnorms = np.einsum("ij,ij->i", q, q)
    dists = block_distances(q, qnorms, cents, cnorms, snapshot.metric)
    n = min(batch.nprobe, len(pids))
    groups: dict[int, list[int]] = {}
    for qi in range(batch.size):
        order = np.lexsort((pids, dists[qi]))[:n]
        for j in order:
            groups.setdefault(int(pids[j]), []).append(qi)
    groups.setdefault(DELTA_PARTITION, []).extend(range(batch.size))
    return groups


@dataclass
class BatchReport:
    partitions_scanned: int = 0
    rows_scanned: int = 0
    plan: dict[int, int] = field(default_factory=dict)  # pid -> group size


def execute_batch(
    snapshot: Snapshot,
    batch: QueryBatch,
    workers: int | None = None,
    report: BatchReport | None = None,
) -> list[ResultSet]:
    """Run the plan, scanning each planned partition exactly once.

    Workers pull whole partitions off a queue ordered by descending group
    size (largest groups first so stragglers are small). Each query owns a
    heap guarded by a lock: distance sub-blocks are (<=64 queries) x (one
    extent), and each row of the sub-block is offered to one query's heap.
    """
    q = batch.queries
    if q.shape[1] != snapshot.dimension:
        raise ValueError(f"query dimension {q.shape[1]} != store dimension {snapshot.dimension}")
    if snapshot.metric == Metric.COSINE:
        q = normalize_rows(q)
    qnorms = np.einsum("ij,ij->i", q, q)
    plan = plan_batch(snapshot, batch)
    if report is not None:
        report.plan = {pid: len(g) for pid, g in plan.items()}
    heaps = [TopKHeap(batch.k) for _ in range(batch.size)]
    locks = [threading.Lock() for _ in range(batch.size)]
    order = sorted(plan, key=lambda pid: (-len(plan[pid]), pid))
    queue: SimpleQueue = SimpleQueue()
    for pid in order:
        queue.put(pid)

    rows_seen = [0]
    seen_lock = threading.Lock()

    def scan_partition(pid: int) -> int:
        group = plan[pid]
        qsub = q[group]
        nsub = qnorms[group]
        rows = 0
        for ids, assets, block, bnorms in snapshot.iter_blocks(pid):
            rows += len(ids)
            for s in range(0, len(group), QUERY_SUBBLOCK):
                dblock = block_distances(
                    qsub[s : s + QUERY_SUBBLOCK], nsub[s : s + QUERY_SUBBLOCK], block, bnorms, snapshot.metric
                )
                for r, qi in enumerate(group[s : s + QUERY_SUBBLOCK]):
                    with locks[qi]:
                        offer_block(heaps[qi], dblock[r], ids, assets, batch.k)
        return rows

    def drain():
        rows = 0
        while True:
            try:
                pid = queue.get_nowait()
            except Empty:
                break
            rows += scan_partition(pid)
        with seen_lock:
            rows_seen[0] += rows

    nworkers = workers if workers is not None else snapshot.store.config.workers
    nworkers = max(1, min(nworkers, len(order)))
    if nworkers <= 1:
        drain()
    else:
        futures = [snapshot.store.executor().submit(drain) for _ in range(nworkers)]
        for f in futures:
            f.result()
    if report is not None:
        report.partitions_scanned = len(order)
        report.rows_scanned = rows_seen[0]
    return [
        ResultSet([SearchHit(a, vid, d) for d, vid, a in merge_heaps([h], batch.k)])
        for h in heaps
    ]
