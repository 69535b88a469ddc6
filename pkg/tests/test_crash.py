"""Fault injection at the commit kill points: all-or-nothing on reopen."""

import numpy as np
import pytest

from mvec.storage import (
    DELTA_PARTITION,
    KILL_POINTS,
    CentroidRecord,
    DbConfig,
    InjectedCrash,
    StorageError,
    VectorStore,
)


def fresh(path, **kw):
    return VectorStore.open(str(path), DbConfig(dimension=4, **kw))


def commit_rows(store, n, prefix="a", start=0):
    txn = store.begin_write()
    for i in range(n):
        txn.upsert_vectors(f"{prefix}:{start + i}", [np.full(4, start + i, dtype=np.float32)])
    txn.commit()


def crash_commit(store, point, mutate):
    store.kill_points.add(point)
    txn = store.begin_write()
    mutate(txn)
    with pytest.raises(InjectedCrash):
        txn.commit()


@pytest.mark.parametrize("point", KILL_POINTS)
def test_crashed_insert_is_all_or_nothing(tmp_path, point):
    p = tmp_path / "c.mvec"
    store = fresh(p)
    commit_rows(store, 10, "a")

    def add_ten(txn):
        for i in range(10):
            txn.upsert_vectors(f"b:{i}", [np.full(4, 100 + i, dtype=np.float32)])

    crash_commit(store, point, add_ten)
    with pytest.raises(StorageError):
        store.begin_snapshot()

    snap = fresh(p).begin_snapshot()
    assert snap.total_rows() in (10, 20)
    by_prefix = {"a": 0, "b": 0}
    for r in snap.iter_records(DELTA_PARTITION):
        by_prefix[r.asset_id.split(":")[0]] += 1
        assert np.all(r.embedding == r.embedding[0])  # rows are intact, not torn
    assert by_prefix["a"] == 10
    assert by_prefix["b"] in (0, 10)
    snap.store.close()


@pytest.mark.parametrize("point", KILL_POINTS)
def test_crashed_delete_is_all_or_nothing(tmp_path, point):
    p = tmp_path / "c.mvec"
    store = fresh(p)
    txn = store.begin_write()
    txn.upsert_vectors("a", np.ones((3, 4), dtype=np.float32))
    txn.upsert_vectors("b", np.ones((2, 4), dtype=np.float32))
    txn.commit()
    crash_commit(store, point, lambda txn: txn.delete_asset("a"))

    snap = fresh(p).begin_snapshot()
    assert len(snap.asset_vector_ids("a")) in (0, 3)
    assert len(snap.asset_vector_ids("b")) == 2
    assert snap.total_rows() == 2 + len(snap.asset_vector_ids("a"))
    snap.store.close()


@pytest.mark.parametrize("point", KILL_POINTS)
def test_crashed_reassignment_is_all_or_nothing(tmp_path, point):
    p = tmp_path / "c.mvec"
    store = fresh(p)
    commit_rows(store, 20)

    def recluster(txn):
        txn.put_centroids([CentroidRecord(i, np.zeros(4, dtype=np.float32)) for i in range(2)])
        txn.update_assignments({v: v % 2 for v in range(1, 21)})

    crash_commit(store, point, recluster)

    snap = fresh(p).begin_snapshot()
    n_delta = snap.partition_count(DELTA_PARTITION)
    assert n_delta in (0, 20)  # never a half-moved table
    if n_delta == 0:
        assert snap.centroids() is not None
        assert snap.partition_sizes() == {0: 10, 1: 10}
    else:
        assert snap.centroids() is None
    assert snap.total_rows() == 20
    snap.store.close()


def test_mixed_kind_commit_is_atomic(tmp_path):
    # One txn touching vectors, attrs, centroids, meta, and the stats blob:
    # a crash may not leave any subset applied.
    p = tmp_path / "c.mvec"
    store = fresh(p, schema={"year": "int"})
    commit_rows(store, 4)

    def mixed(txn):
        txn.upsert_vectors("x", [np.ones(4, dtype=np.float32)], attrs={"year": 2024})
        txn.put_centroids([CentroidRecord(0, np.zeros(4, dtype=np.float32))])
        txn.update_meta({"flag": 1})
        txn.put_stats_blob(b"stats!")

    crash_commit(store, "after_data_append", mixed)

    snap = fresh(p).begin_snapshot()
    applied = [
        len(snap.asset_vector_ids("x")) == 1,
        "x" in snap.attrs(),
        snap.centroids() is not None,
        snap.meta.get("flag") == 1,
        snap.stats_blob() == b"stats!",
    ]
    assert all(applied) or not any(applied)
    snap.store.close()


def test_store_usable_after_recovery(tmp_path):
    # Recovery truncates pre-commit garbage; later commits must work and the
    # vector-id sequence must not collide with surviving rows.
    p = tmp_path / "c.mvec"
    store = fresh(p)
    commit_rows(store, 5, "a")
    crash_commit(store, "after_data_append", lambda txn: txn.upsert_vectors("z", np.ones((1, 4), dtype=np.float32)))

    store = fresh(p)
    commit_rows(store, 5, "b", start=5)
    snap = store.begin_snapshot()
    vids = [r.vector_id for r in snap.iter_records(DELTA_PARTITION)]
    assert len(vids) == len(set(vids)) == snap.total_rows()
    store.close()


def test_repeated_crashes_never_lose_committed_data(tmp_path):
    p = tmp_path / "c.mvec"
    committed = 0
    for round_no, point in enumerate(KILL_POINTS):
        store = fresh(p)
        assert store.begin_snapshot().total_rows() >= committed
        committed = store.begin_snapshot().total_rows()
        commit_rows(store, 3, "ok", start=round_no * 100)
        committed += 3
        crash_commit(
            store, point, lambda txn: txn.upsert_vectors("tmp", np.ones((2, 4), dtype=np.float32))
        )
    snap = fresh(p).begin_snapshot()
    assert sum(1 for r in snap.iter_records(DELTA_PARTITION) if r.asset_id.startswith("ok:")) == 12
    snap.store.close()
