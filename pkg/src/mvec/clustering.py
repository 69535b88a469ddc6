"""Memory-bounded balanced mini-batch k-means over the vector store.

The dataset is never materialized: initialization reservoir-samples the
vector-id stream (ids only) and fetches just the chosen rows, each mini-batch
fetches its sample by row-level reads, and the final assignment pass streams
in blocks no larger than the batch size. Peak resident dataset vectors is
therefore batch_size + k plus a small constant, tracked by ResidentMeter.

Oversized clusters are discouraged by an additive penalty on the assignment
distance: balance_weight * max(0, count - target)/target, scaled by the
running mean of all assignment distances seen so far so the penalty lives on
the same scale as the data.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .kernel import Metric, batched_distances
from .storage import CentroidRecord, Snapshot, VectorStore


@dataclass
class ClusteringConfig:
    target_size: int = 100
    batch_size: int | None = None  # default min(10 * k, N)
    iterations: int = 30
    balance_weight: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.target_size < 1:
            raise ValueError("target_size must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class ResidentMeter:
    """Counts dataset-vector rows currently held by clustering-owned arrays."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def hold(self, rows: int) -> None:
        with self._lock:
            self.current += rows
            if self.current > self.peak:
                self.peak = self.current

    def release(self, rows: int) -> None:
        with self._lock:
            self.current -= rows


@dataclass
class ClusteringState:
    """Live centroids plus the per-centroid sample counts driving the
    learning rate (eta = 1/count) and the balance penalty."""

    centroids: np.ndarray  # k x D float64
    counts: np.ndarray  # int64 per centroid
    target_size: int
    balance_weight: float
    scale_sum: float = 0.0
    scale_n: int = 0
    assignments: dict = field(default_factory=dict)  # last batch: row index -> centroid

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def penalty_scale(self) -> float:
        return self.scale_sum / self.scale_n if self.scale_n else 0.0


def plan_cluster_count(n_rows: int, target_size: int) -> int:
    return max(1, n_rows // target_size)


def reservoir_sample_ids(id_stream, k: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample of k ids from a stream, holding at most k at a time."""
    res: list[int] = []
    for i, vid in enumerate(id_stream):
        if i < k:
            res.append(vid)
        else:
            j = int(rng.integers(0, i + 1))
            if j < k:
                res[j] = vid
    return res


def nearest_balanced(
    centroids: np.ndarray,
    counts: np.ndarray,
    x: np.ndarray,
    balance_weight: float,
    target_size: int,
    penalty_scale: float,
) -> int:
    """Index of the centroid minimizing distance + size-overshoot penalty.

    Ties resolve to the lower index. With balance_weight 0 this is the plain
    nearest centroid.
    """
    d = batched_distances(x, centroids, Metric.SQUARED_L2)[0]
    over = np.maximum(0, counts - target_size) / target_size
    return int(np.argmin(d + balance_weight * over * penalty_scale))


def _assign_batch(state: ClusteringState, batch: np.ndarray) -> np.ndarray:
    d = batched_distances(batch, state.centroids, Metric.SQUARED_L2)
    # The scale is updated with this batch's distances before the penalty is
    # applied, so the very first batch already penalizes on-scale.
    state.scale_n += d.size
    state.scale_sum += float(d.sum())
    over = np.maximum(0, state.counts - state.target_size) / state.target_size
    return np.argmin(d + state.balance_weight * over * state.penalty_scale, axis=1)


def minibatch_step(state: ClusteringState, batch: np.ndarray) -> np.ndarray:
    """One two-phase mini-batch update; returns the cached assignments.

    Phase 1 assigns every batch row with the counts frozen; phase 2 applies
    the per-centroid running mean (v0*c + sum(x)) / (v0 + j), which equals the
    per-row eta = 1/v update sequence.
    """
    assign = _assign_batch(state, batch)
    state.assignments = {i: int(c) for i, c in enumerate(assign)}
    for c in np.unique(assign):
        rows = batch[assign == c]
        v0 = state.counts[c]
        state.centroids[c] = (v0 * state.centroids[c] + rows.sum(axis=0)) / (v0 + len(rows))
        state.counts[c] = v0 + len(rows)
    return assign


def final_assign(
    snapshot: Snapshot,
    centroids: np.ndarray,
    block_rows: int,
    meter: ResidentMeter | None = None,
) -> dict[int, int]:
    """Unpenalized nearest-centroid assignment for every vector, streamed."""
    out: dict[int, int] = {}
    all_ids = _id_stream(snapshot)
    for start in range(0, len(all_ids), block_rows):
        chunk = all_ids[start : start + block_rows]
        if meter:
            meter.hold(len(chunk))
        block = snapshot.fetch_embeddings(chunk, dtype=np.float64)
        d = batched_distances(block, centroids, Metric.SQUARED_L2)
        for vid, c in zip(chunk, np.argmin(d, axis=1)):
            out[vid] = int(c)
        del block
        if meter:
            meter.release(len(chunk))
    return out


def _id_stream(snapshot: Snapshot) -> list[int]:
    return list(snapshot.iter_vector_ids())


@dataclass
class ClusterReport:
    k: int
    n_rows: int
    batch_size: int
    iterations: int
    seed: int
    partition_sizes: dict[int, int]
    peak_resident_vectors: int
    reseeded: int

    def as_dict(self) -> dict:
        sizes = np.array(list(self.partition_sizes.values()))
        return {
            "k": self.k,
            "rows": self.n_rows,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "seed": self.seed,
            "min_partition": int(sizes.min()),
            "max_partition": int(sizes.max()),
            "mean_partition": float(sizes.mean()),
            "peak_resident_vectors": self.peak_resident_vectors,
            "reseeded": self.reseeded,
        }


def cluster(
    store: VectorStore,
    config: ClusteringConfig,
    commit: bool = True,
    extra_meta: dict | None = None,
) -> ClusterReport:
    """Cluster every vector (main + delta) and commit centroids + assignments.

    One write transaction: the whole centroid table is replaced and every row
    is physically re-clustered into its partition; the delta partition is
    empty afterwards. Deterministic for a fixed seed. `extra_meta` rides
    along in the same commit (maintenance records its scan budget there).

    Raises ValueError on an empty store.
    """
    snapshot = store.begin_snapshot()
    n = snapshot.total_rows()
    if n == 0:
        raise ValueError("cannot cluster an empty store")
    t = config.target_size
    k = plan_cluster_count(n, t)
    s = config.batch_size if config.batch_size is not None else min(10 * k, n)
    s = min(s, n)
    rng = np.random.default_rng(config.seed)
    meter = ResidentMeter()

    sample_ids = reservoir_sample_ids(snapshot.iter_vector_ids(), k, rng)
    meter.hold(k)
    centroids = snapshot.fetch_embeddings(sample_ids, dtype=np.float64)
    state = ClusteringState(
        centroids=centroids,
        counts=np.zeros(k, dtype=np.int64),
        target_size=t,
        balance_weight=config.balance_weight,
    )

    all_ids = np.array(_id_stream(snapshot), dtype=np.uint64)
    for _ in range(config.iterations):
        batch_ids = rng.choice(all_ids, size=s, replace=False)
        meter.hold(s)
        batch = snapshot.fetch_embeddings(batch_ids, dtype=np.float64)
        minibatch_step(state, batch)
        del batch
        meter.release(s)

    assign = final_assign(snapshot, state.centroids, block_rows=min(256, s), meter=meter)

    sizes = np.bincount(np.fromiter(assign.values(), dtype=np.int64, count=len(assign)), minlength=k)
    empties = np.flatnonzero(sizes == 0)
    reseeded = 0
    if len(empties):
        largest = int(np.argmax(sizes))
        donor_ids = [vid for vid, c in assign.items() if c == largest]
        picks = rng.choice(len(donor_ids), size=min(len(empties), len(donor_ids)), replace=False)
        for c, pick in zip(empties, picks):
            meter.hold(1)
            state.centroids[int(c)] = snapshot.fetch_embeddings(
                [donor_ids[int(pick)]], dtype=np.float64
            )[0]
            meter.release(1)
            reseeded += 1
        # one reassignment pass over the donor partition only
        for start in range(0, len(donor_ids), min(256, s)):
            chunk = donor_ids[start : start + min(256, s)]
            meter.hold(len(chunk))
            block = snapshot.fetch_embeddings(chunk, dtype=np.float64)
            d = batched_distances(block, state.centroids, Metric.SQUARED_L2)
            for vid, c in zip(chunk, np.argmin(d, axis=1)):
                assign[vid] = int(c)
            del block
            meter.release(len(chunk))
        sizes = np.bincount(
            np.fromiter(assign.values(), dtype=np.int64, count=len(assign)), minlength=k
        )

    partition_sizes = {int(c): int(sz) for c, sz in enumerate(sizes)}
    if commit:
        txn = store.begin_write()
        try:
            txn.put_centroids(
                [CentroidRecord(c, state.centroids[c].astype(np.float32)) for c in range(k)]
            )
            txn.update_assignments(assign)
            meta = {"build_target_size": t, "build_seed": config.seed, "baseline_avg": n / k}
            if extra_meta:
                meta.update(extra_meta)
            txn.update_meta(meta)
            txn.commit()
        except BaseException:
            txn.rollback()
            raise
    meter.release(k)
    return ClusterReport(
        k=k,
        n_rows=n,
        batch_size=s,
        iterations=config.iterations,
        seed=config.seed,
        partition_sizes=partition_sizes,
        peak_resident_vectors=meter.peak,
        reseeded=reseeded,
    )
