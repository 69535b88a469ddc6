import numpy as np
import pytest

from mvec.kernel import (
    Metric,
    TopKHeap,
    ZeroVectorError,
    batched_distances,
    distance,
    merge_heaps,
    normalize_rows,
)

from oracles import ref_distance, topk_stream_oracle


def test_distance_identity_is_zero():
    v = np.array([1.5, -2.0, 3.25])
    assert distance(v, v, Metric.SQUARED_L2) == 0.0


def test_cosine_orthogonal_is_one():
    assert distance([1.0, 0.0], [0.0, 1.0], Metric.COSINE) == pytest.approx(1.0)


def test_squared_l2_hand_value():
    # (3-0)^2 + (4-0)^2 = 25
    assert distance([3.0, 4.0], [0.0, 0.0], Metric.SQUARED_L2) == 25.0


@pytest.mark.parametrize("metric,name", [(Metric.SQUARED_L2, "l2"), (Metric.COSINE, "cosine")])
def test_distance_matches_scalar_reference(metric, name):
    rng = np.random.default_rng(1)
    for _ in range(50):
        a = rng.normal(size=16)
        b = rng.normal(size=16)
        got = distance(a, b, metric)
        want = ref_distance(a, b, name)
        assert got == pytest.approx(want, rel=1e-5)


def test_distance_dimension_mismatch():
    with pytest.raises(ValueError):
        distance([1.0, 2.0], [1.0, 2.0, 3.0], Metric.SQUARED_L2)


def test_cosine_zero_vector_rejected():
    with pytest.raises(ZeroVectorError):
        distance([0.0, 0.0], [1.0, 0.0], Metric.COSINE)
    with pytest.raises(ZeroVectorError):
        normalize_rows(np.zeros((2, 3)))


def test_batched_single_pair_equals_scalar():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=8), rng.normal(size=8)
    for metric in (Metric.SQUARED_L2, Metric.COSINE):
        block = batched_distances(a, b, metric)
        assert block.shape == (1, 1)
        assert block[0, 0] == pytest.approx(distance(a, b, metric), rel=1e-12)


def test_batched_self_block_zero_diagonal_symmetric():
    rng = np.random.default_rng(3)
    Q = rng.normal(size=(5, 6))
    block = batched_distances(Q, Q, Metric.SQUARED_L2)
    assert np.allclose(np.diag(block), 0.0, atol=1e-10)
    assert np.allclose(block, block.T, atol=1e-10)
    assert (block >= 0.0).all()


@pytest.mark.parametrize("metric,name", [(Metric.SQUARED_L2, "l2"), (Metric.COSINE, "cosine")])
def test_batched_matches_scalar_loop(metric, name):
    rng = np.random.default_rng(4)
    Q = rng.normal(size=(32, 64))
    V = rng.normal(size=(128, 64))
    block = batched_distances(Q, V, metric)
    for i in range(0, 32, 7):
        for j in range(0, 128, 13):
            assert block[i, j] == pytest.approx(ref_distance(Q[i], V[j], name), rel=1e-4)


def test_batched_dimension_mismatch():
    with pytest.raises(ValueError):
        batched_distances(np.ones((2, 3)), np.ones((2, 4)), Metric.SQUARED_L2)


def test_heap_never_exceeds_capacity_and_keeps_smallest():
    rng = np.random.default_rng(5)
    items = [(float(d), i, f"a{i}") for i, d in enumerate(rng.normal(size=500))]
    heap = TopKHeap(16)
    for d, vid, a in items:
        heap.offer(d, vid, a)
        assert len(heap) <= 16
    got = sorted(heap.items(), key=lambda e: (e[0], e[1]))
    assert got == topk_stream_oracle(items, 16)


def test_heap_tie_breaks_toward_smaller_vector_id():
    heap = TopKHeap(2)
    heap.offer(1.0, 30, "c")
    heap.offer(1.0, 10, "a")
    heap.offer(1.0, 20, "b")
    kept = sorted(vid for _d, vid, _a in heap.items())
    assert kept == [10, 20]


def test_heap_bound_reports_eviction_threshold():
    heap = TopKHeap(2)
    assert heap.bound() is None
    heap.offer(3.0, 1, "x")
    heap.offer(1.0, 2, "y")
    assert heap.bound() == (3.0, 1)
    heap.offer(2.0, 3, "z")
    assert heap.bound() == (2.0, 3)


def test_merge_single_heap_is_its_sorted_contents():
    heap = TopKHeap(4)
    for d, vid in [(2.0, 4), (0.5, 9), (1.0, 1)]:
        heap.offer(d, vid, str(vid))
    assert merge_heaps([heap], 4) == [(0.5, 9, "9"), (1.0, 1, "1"), (2.0, 4, "4")]


def test_merge_disjoint_ranges_orders_lower_first():
    low, high = TopKHeap(3), TopKHeap(3)
    for i in range(3):
        low.offer(float(i), i, f"l{i}")
        high.offer(100.0 + i, 100 + i, f"h{i}")
    merged = merge_heaps([low, high], 4)
    assert [vid for _d, vid, _a in merged] == [0, 1, 2, 100]


def test_merge_invariant_to_partitioning():
    rng = np.random.default_rng(6)
    items = [(float(d), i, f"a{i}") for i, d in enumerate(rng.normal(size=400))]
    want = topk_stream_oracle(items, 10)
    for nheaps in (1, 3, 8):
        heaps = [TopKHeap(10) for _ in range(nheaps)]
        assignment = rng.integers(0, nheaps, size=len(items))
        for slot, (d, vid, a) in zip(assignment, items):
            heaps[slot].offer(d, vid, a)
        assert merge_heaps(heaps, 10) == want


def test_metric_names_round_trip():
    assert Metric.from_name("l2") is Metric.SQUARED_L2
    assert Metric.from_name("cosine") is Metric.COSINE
    assert Metric.from_name("COSINE") is Metric.COSINE
    with pytest.raises(ValueError):
        Metric.from_name("euclid")
    assert Metric.SQUARED_L2.tag_name == "l2"
