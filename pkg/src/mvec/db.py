"""High-level facade tying storage, clustering, search, and maintenance together.

`Database` is the one-stop entry point for applications and the CLI: it owns
a `VectorStore` and exposes ingest, build, the three search paths (exact,
ANN, hybrid), batched queries, and maintenance. All reads run on snapshots,
so any mix of concurrent readers is safe against one writer in this process.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import batch as batch_mod
from . import hybrid as hybrid_mod
from . import maintenance
from .clustering import ClusteringConfig
from .hybrid import Node, PlanChoice, parse_predicate
from .kernel import Metric
from .maintenance import AutoReport, FlushReport, IndexStats, MaintenancePolicy, RebuildReport
from .search import ResultSet, SearchRequest, ann_search, knn_exact
from .storage import DbConfig, Snapshot, VectorStore


class Database:
    """An embedded vector database in a single file."""

    def __init__(self, store: VectorStore):
        self._store = store

    @classmethod
    def open(
        cls,
        path: str,
        dimension: int | None = None,
        metric: str | Metric = Metric.SQUARED_L2,
        schema: dict[str, str] | None = None,
        **config_kwargs,
    ) -> "Database":
        """Open or create the database file at `path`.

        Creation requires `dimension`; on an existing file, dimension and
        metric are read back from the header and must not conflict.
        """
        if isinstance(metric, str):
            metric = Metric.from_name(metric)
        config = DbConfig(
            dimension=dimension, metric=metric, schema=dict(schema or {}), **config_kwargs
        )
        return cls(VectorStore.open(path, config))

    @property
    def store(self) -> VectorStore:
        return self._store

    @property
    def path(self) -> str:
        return self._store.path

    @property
    def dimension(self) -> int:
        return self._store.dimension

    @property
    def metric(self) -> Metric:
        return self._store.metric

    @property
    def schema(self) -> dict[str, str]:
        return dict(self._store.config.schema)

    @property
    def counters(self):
        return self._store.counters

    def snapshot(self) -> Snapshot:
        return self._store.begin_snapshot()

    # ------------------------------------------------------------- writes

    def upsert(self, asset_id: str, embeddings, attrs: dict | None = None) -> int:
        """Insert or replace all vectors of one asset. Returns rows written."""
        txn = self._store.begin_write()
        try:
            n = txn.upsert_vectors(asset_id, embeddings, attrs)
            txn.commit()
            return n
        except BaseException:
            txn.rollback()
            raise

    def upsert_many(self, records: Iterable[tuple[str, np.ndarray, dict | None]]) -> int:
        """Upsert a stream of (asset_id, embeddings, attrs) in one commit."""
        txn = self._store.begin_write()
        try:
            n = 0
            for asset_id, emb, attrs in records:
                n += txn.upsert_vectors(asset_id, emb, attrs)
            txn.commit()
            return n
        except BaseException:
            txn.rollback()
            raise

    def delete(self, asset_id: str) -> int:
        txn = self._store.begin_write()
        try:
            n = txn.delete_asset(asset_id)
            txn.commit()
            return n
        except BaseException:
            txn.rollback()
            raise

    # -------------------------------------------------------------- index

    def build(
        self,
        target_size: int = 100,
        batch_size: int | None = None,
        iterations: int = 30,
        balance_weight: float = 1.0,
        seed: int = 0,
        nprobe_target: int | None = None,
    ) -> RebuildReport:
        """(Re)build the IVF index over everything currently stored."""
        config = ClusteringConfig(
            target_size=target_size,
            batch_size=batch_size,
            iterations=iterations,
            balance_weight=balance_weight,
            seed=seed,
        )
        return maintenance.full_rebuild(self._store, config, nprobe_target)

    # ------------------------------------------------------------ queries

    def search(self, query, k: int = 10, nprobe: int = 8, workers: int | None = None) -> ResultSet:
        return ann_search(self.snapshot(), SearchRequest(np.asarray(query), k, nprobe), workers)

    def exact(self, query, k: int = 10, workers: int | None = None) -> ResultSet:
        return knn_exact(self.snapshot(), np.asarray(query), k, workers)

    def hybrid(
        self,
        query,
        predicate: str | Node,
        k: int = 10,
        nprobe: int = 8,
        threshold: float | None = None,
        workers: int | None = None,
    ) -> tuple[ResultSet, PlanChoice]:
        """Filtered search; the optimizer picks pre- or post-filtering."""
        snap = self.snapshot()
        node = parse_predicate(predicate) if isinstance(predicate, str) else predicate
        return hybrid_mod.hybrid_search(snap, np.asarray(query), k, nprobe, node, threshold, workers)

    def search_batch(
        self,
        queries: Sequence,
        k: int = 10,
        nprobe: int = 8,
        workers: int | None = None,
        report: batch_mod.BatchReport | None = None,
    ) -> list[ResultSet]:
        qb = batch_mod.QueryBatch(np.asarray(queries), k, nprobe)
        return batch_mod.execute_batch(self.snapshot(), qb, workers, report)

    # -------------------------------------------------------- maintenance

    def flush(self) -> FlushReport:
        return maintenance.flush_delta(self._store)

    def stats(self) -> IndexStats:
        return maintenance.compute_stats(self.snapshot())

    def auto_maintain(
        self, growth_threshold: float = 0.5, config: ClusteringConfig | None = None
    ) -> AutoReport:
        return maintenance.auto_maintain(
            self._store, MaintenancePolicy(growth_threshold), config
        )

    def auto_nprobe(self, default: int = 8) -> int:
        return maintenance.auto_nprobe(self.snapshot(), default)

    # ------------------------------------------------------------- admin

    def purge_caches(self) -> None:
        self._store.drop_caches()

    def reopen(self) -> "Database":
        """Close and reopen the file (cold-cache benchmarking)."""
        path, config = self._store.path, self._store.config
        self._store.close()
        self._store = VectorStore.open(path, config)
        return self

    def close(self) -> None:
        self._store.close()

    def __enter__(self) -> "Database":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
