"""Delta flush, rebuild policy, auto-tuned nprobe, and index statistics.

Writes land in the delta store, which every query scans, so an unbounded
delta degrades latency without hurting recall. Maintenance drains it two
ways: a flush assigns each delta row to its nearest current partition and
nudges that centroid by the running mean (cheap, keeps recall stable as the
dataset drifts), and a full rebuild reruns clustering from scratch (costly,
resets the partition-size baseline). The auto policy flushes, then rebuilds
only when the average main-partition size has grown past the configured
fraction of the baseline recorded at the last build.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import clustering, hybrid
from .clustering import ClusteringConfig
from .search import block_distances
from .storage import CentroidRecord, DELTA_PARTITION, Snapshot, VectorStore


@dataclass(frozen=True)
class MaintenancePolicy:
    """growth_threshold: rebuild when current_avg >= baseline * (1 + threshold).
    delta_flush_trigger: delta row count above which stats raise the flush
    advisory flag (advisory only; nothing runs uninvited)."""

    growth_threshold: float = 0.5
    delta_flush_trigger: int | None = None

    def __post_init__(self):
        if self.growth_threshold <= 0:
            raise ValueError("growth_threshold must be positive")


@dataclass
class IndexStats:
    n_rows: int
    k: int
    delta_size: int
    partition_sizes: dict[int, int]
    baseline_avg: float
    current_avg: float
    growth_ratio: float
    flush_advisory: bool = False

    def as_dict(self) -> dict:
        sizes = [s for p, s in self.partition_sizes.items() if p != DELTA_PARTITION]
        return {
            "rows": self.n_rows,
            "partitions": self.k,
            "delta_rows": self.delta_size,
            "baseline_avg_partition_size": self.baseline_avg,
            "current_avg_partition_size": self.current_avg,
            "growth_ratio": self.growth_ratio,
            "flush_advisory": self.flush_advisory,
            "min_partition": min(sizes) if sizes else 0,
            "max_partition": max(sizes) if sizes else 0,
        }


def compute_stats(snapshot: Snapshot, policy: MaintenancePolicy | None = None) -> IndexStats:
    """Live structural statistics; always reflects the snapshot, never a blob."""
    sizes = snapshot.partition_sizes()
    delta = sizes.get(DELTA_PARTITION, 0)
    table = snapshot.centroids()
    k = len(table[0]) if table is not None else 0
    main_rows = snapshot.total_rows() - delta
    current = main_rows / k if k else 0.0
    baseline = float(snapshot.meta.get("baseline_avg", 0.0))
    growth = (current / baseline - 1.0) if baseline > 0 else 0.0
    advisory = bool(
        policy is not None
        and policy.delta_flush_trigger is not None
        and delta > policy.delta_flush_trigger
    )
    return IndexStats(
        n_rows=snapshot.total_rows(),
        k=k,
        delta_size=delta,
        partition_sizes=sizes,
        baseline_avg=baseline,
        current_avg=current,
        growth_ratio=growth,
        flush_advisory=advisory,
    )


def should_rebuild(stats: IndexStats, policy: MaintenancePolicy) -> bool:
    if stats.k == 0 or stats.baseline_avg <= 0:
        return False
    return stats.growth_ratio >= policy.growth_threshold


@dataclass
class FlushReport:
    vectors_moved: int = 0
    centroids_updated: int = 0
    row_writes: int = 0


def flush_delta(store: VectorStore, refresh_stats: bool = True) -> FlushReport:
    """Drain the delta store into the main partitions in one commit.

    Rows move in ascending vector id; each goes to the partition whose
    centroid is nearest at that moment, and that centroid shifts by the
    running mean c <- (m*c + x) / (m + 1), with m counting the rows the
    partition held when the flush started plus those flushed into it since.
    Updated centroids land as an overlay, so the commit writes only the
    moved rows, the touched centroids, and the manifest.
    """
    snap = store.begin_snapshot()
    table = snap.centroid_f64()
    report = FlushReport()
    if table is None:
        return report  # nothing to flush into; build first
    rows = [
        (int(vid), emb)
        for ids, _assets, emb64, _norms in snap.iter_blocks(DELTA_PARTITION)
        for vid, emb in zip(ids, emb64)
    ]
    if not rows:
        if refresh_stats:
            _refresh_stats(store)
        return report
    rows.sort(key=lambda r: r[0])
    pids, cents, _cnorms = table
    cents = cents.copy()
    sizes = snap.partition_sizes()
    counts = np.array([sizes.get(int(p), 0) for p in pids], dtype=np.float64)
    norms = np.einsum("ij,ij->i", cents, cents)
    moves: dict[int, int] = {}
    touched: set[int] = set()
    for vid, x in rows:
        d = block_distances(x.reshape(1, -1), np.array([float(x @ x)]), cents, norms, snap.metric)[0]
        ci = int(np.lexsort((pids, d))[0])
        cents[ci] = (counts[ci] * cents[ci] + x) / (counts[ci] + 1.0)
        norms[ci] = float(cents[ci] @ cents[ci])
        counts[ci] += 1.0
        moves[vid] = int(pids[ci])
        touched.add(ci)
    before = store.counters.snapshot().get("row_writes", 0)
    txn = store.begin_write()
    try:
        txn.update_assignments(moves)
        txn.update_centroids(
            [CentroidRecord(int(pids[ci]), cents[ci].astype(np.float32)) for ci in sorted(touched)]
        )
        txn.commit()
    except BaseException:
        txn.rollback()
        raise
    report.vectors_moved = len(moves)
    report.centroids_updated = len(touched)
    report.row_writes = store.counters.snapshot().get("row_writes", 0) - before
    if refresh_stats:
        _refresh_stats(store)
    return report


@dataclass
class RebuildReport:
    k: int = 0
    n_rows: int = 0
    row_writes: int = 0
    cluster_report: dict = field(default_factory=dict)


def full_rebuild(
    store: VectorStore,
    config: ClusteringConfig | None = None,
    nprobe_target: int | None = None,
    refresh_stats: bool = True,
) -> RebuildReport:
    """Recluster everything (delta included) and reset the size baseline.

    When nprobe_target is given, the commit records the scan budget
    nprobe_target * avg_partition_size_at_build; auto_nprobe() later divides
    that budget by the current average so the scanned-row count stays put as
    partitions grow.
    """
    config = config or ClusteringConfig()
    before = store.counters.snapshot().get("row_writes", 0)
    extra = None
    if nprobe_target is not None:
        n0 = max(1, int(nprobe_target))
        snap = store.begin_snapshot()
        k = clustering.plan_cluster_count(snap.total_rows(), config.target_size)
        avg0 = snap.total_rows() / k if k else 0.0
        extra = {"target_scanned_vectors": n0 * avg0, "nprobe_target": n0}
    creport = clustering.cluster(store, config, extra_meta=extra)
    writes = store.counters.snapshot().get("row_writes", 0) - before
    if refresh_stats:
        _refresh_stats(store)
    return RebuildReport(
        k=creport.k,
        n_rows=creport.n_rows,
        row_writes=writes,
        cluster_report=creport.as_dict(),
    )


def auto_nprobe(snapshot: Snapshot, default: int = 8) -> int:
    """nprobe that keeps expected scanned rows at the budget fixed at build.

    ceil(target_scanned_vectors / current_avg_partition_size), clamped to
    [1, k]. Falls back to the default when no budget was recorded.
    """
    target = snapshot.meta.get("target_scanned_vectors")
    stats = compute_stats(snapshot)
    if target is None or stats.k == 0 or stats.current_avg <= 0:
        return max(1, min(default, stats.k)) if stats.k else default
    return max(1, min(stats.k, math.ceil(float(target) / stats.current_avg)))


@dataclass
class AutoReport:
    flush: FlushReport
    rebuilt: bool
    rebuild: RebuildReport | None
    stats: IndexStats


def auto_maintain(
    store: VectorStore,
    policy: MaintenancePolicy | None = None,
    config: ClusteringConfig | None = None,
) -> AutoReport:
    """Flush, then rebuild iff the partition-growth trigger fires."""
    policy = policy or MaintenancePolicy()
    flush = flush_delta(store)
    stats = compute_stats(store.begin_snapshot(), policy)
    rebuild = None
    if should_rebuild(stats, policy):
        nprobe_target = store.begin_snapshot().meta.get("nprobe_target")
        rebuild = full_rebuild(store, config, nprobe_target)
        stats = compute_stats(store.begin_snapshot(), policy)
    return AutoReport(flush=flush, rebuilt=rebuild is not None, rebuild=rebuild, stats=stats)


def _refresh_stats(store: VectorStore) -> None:
    """Recompute attribute statistics in a follow-up commit.

    Kept separate from the data commit on purpose: the optimizer tolerates
    stale statistics, and the data commit must not grow a dependency on the
    attribute scan.
    """
    snap = store.begin_snapshot()
    blob = hybrid.build_stats(snap).to_json()
    txn = store.begin_write()
    try:
        txn.put_stats_blob(blob)
        txn.commit()
    except BaseException:
        txn.rollback()
        raise
