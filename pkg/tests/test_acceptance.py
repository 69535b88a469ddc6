"""End-to-end acceptance gate.

Ten numbered criteria, each printing exactly one PASS/FAIL line (run with
`pytest tests/test_acceptance.py -v -s` to see them). Every expected value is
either computed by an independent oracle in this file or derived arithmetic;
tolerances are stated inline next to each gate. The datasets are synthetic
clustered mixtures; the public SIFT vectors are not bundled, so the exact
oracle track runs on random vectors only.
"""

import gc
import shutil
import threading
import time

import numpy as np
import pytest

from mvec.batch import BatchReport, QueryBatch, execute_batch, plan_batch
from mvec.clustering import ClusteringConfig, plan_cluster_count
from mvec.db import Database
from mvec.hybrid import hybrid_search, parse_predicate, postfilter_search, prefilter_search
from mvec.maintenance import (
    MaintenancePolicy,
    auto_nprobe,
    compute_stats,
    flush_delta,
    full_rebuild,
    should_rebuild,
)
from mvec.search import SearchRequest, ann_search, knn_exact
from mvec.storage import (
    DELTA_PARTITION,
    KILL_POINTS,
    DbConfig,
    InjectedCrash,
    VectorStore,
)

from oracles import brute_force_knn, clustered_dataset


def verdict(num, name, ok, detail):
    print(f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num:02d} {name}: {detail}"


# ------------------------------------------------------------------ oracles


def exact_topk_ids(X, q, k, chunk=8192):
    """Vectorized but independent exact top-k: direct float64 coordinate
    differences (no norm expansion), ties to the smaller vector id. Row i of
    X carries vector id i+1, matching ingest order."""
    d = np.empty(len(X))
    q64 = np.asarray(q, dtype=np.float64)
    for s in range(0, len(X), chunk):
        blk = X[s : s + chunk].astype(np.float64) - q64
        d[s : s + chunk] = np.einsum("ij,ij->i", blk, blk)
    order = np.lexsort((np.arange(1, len(X) + 1), d))[:k]
    return [int(i) + 1 for i in order]


def filtered_topk_ids(X, mask, q, k):
    idx = np.flatnonzero(mask)
    sub = exact_topk_ids(X[idx], q, min(k, len(idx)))
    return [int(idx[int(v) - 1]) + 1 for v in sub]


def recall(got_ids, want_ids):
    if not want_ids:
        return 1.0
    return len(set(got_ids) & set(want_ids)) / len(want_ids)


def fill(db, X, prefix="v", start=0, attrs_fn=None):
    db.upsert_many(
        (f"{prefix}:{start + i}", [row], attrs_fn(start + i) if attrs_fn else None)
        for i, row in enumerate(X)
    )


# ----------------------------------------------------- shared built datasets


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def rand10k(work):
    rng = np.random.default_rng(1)
    X = rng.random((10_000, 64), dtype=np.float32)
    db = Database.open(str(work / "rand10k.mvec"), dimension=64)
    fill(db, X)
    db.build(target_size=100, seed=0)
    yield db, X, rng
    db.close()


@pytest.fixture(scope="module")
def big100k(work):
    rng = np.random.default_rng(2)
    X = clustered_dataset(rng, 100_000, 32, blobs=64)
    db = Database.open(str(work / "big100k.mvec"), dimension=32)
    fill(db, X)
    db.build(target_size=100, seed=0)  # k = 1000
    yield db, X, rng
    db.close()


@pytest.fixture(scope="module")
def ds16():
    rng = np.random.default_rng(3)
    return clustered_dataset(rng, 100_000, 16, blobs=50)


# ---------------------------------------------------------------- criteria


def test_c01_exact_oracle_equivalence(rand10k):
    # 100 queries, K=100, ordered-id equality against the scalar oracle
    # (order implies both set equality and the tie rule). Budget: one minute.
    db, X, rng = rand10k
    t0 = time.perf_counter()
    snap = db.snapshot()
    mismatches = 0
    for _ in range(100):
        q = rng.random(64)
        got = knn_exact(snap, q, 100).vector_ids()
        want = [v for _d, v in brute_force_knn(X, range(1, len(X) + 1), q, 100)]
        mismatches += got != want
    elapsed = time.perf_counter() - t0
    verdict(
        1,
        "exact matches scalar brute-force oracle",
        mismatches == 0 and elapsed < 60.0,
        f"100 queries K=100 on 10k random D=64, {mismatches} mismatches, "
        f"{elapsed:.1f}s (SIFT corpus not bundled, random track only)",
    )


def test_c02_exhaustive_limit_identity(rand10k, big100k):
    db1, X1, rng = rand10k
    snap1 = db1.snapshot()
    k1 = len(snap1.centroids()[0])
    mismatches = 0
    for _ in range(100):
        q = rng.random(64)
        if ann_search(snap1, SearchRequest(q, 100, k1)).as_tuples() != knn_exact(snap1, q, 100).as_tuples():
            mismatches += 1
    db2, X2, rng2 = big100k
    snap2 = db2.snapshot()
    k2 = len(snap2.centroids()[0])
    for _ in range(20):
        q = rng2.normal(size=32)
        if ann_search(snap2, SearchRequest(q, 100, k2)).as_tuples() != knn_exact(snap2, q, 100).as_tuples():
            mismatches += 1
    verdict(
        2,
        "nprobe=k identical to exact",
        mismatches == 0,
        f"120 instances over two stores (k={k1} and k={k2}), {mismatches} mismatches",
    )


def test_c03_recall_operating_point(big100k):
    db, X, rng = big100k
    snap = db.snapshot()
    k_parts = len(snap.centroids()[0])
    queries = X[rng.integers(0, len(X), size=100)] + rng.normal(scale=0.25, size=(100, 32)).astype(
        np.float32
    )
    gt = [exact_topk_ids(X, q, 100) for q in queries]
    sweep = [1, 2, 4, 8, 16, 32, 64, 128, 200]
    means, lats = [], []
    for n in sweep:
        rs, t0 = [], time.perf_counter()
        for qi, q in enumerate(queries):
            got = ann_search(snap, SearchRequest(q, 100, n)).vector_ids()
            rs.append(recall(got, gt[qi]))
        lats.append((time.perf_counter() - t0) * 1e3 / len(queries))
        means.append(float(np.mean(rs)))
    monotone = all(b >= a - 1e-12 for a, b in zip(means, means[1:]))
    hit = next((i for i, m in enumerate(means) if m >= 0.90), None)
    ok = monotone and hit is not None and sweep[hit] <= 0.2 * k_parts
    detail = (
        f"k={k_parts}, recall@100 {means[0]:.3f}..{means[-1]:.3f} over nprobe {sweep[0]}..{sweep[-1]}, "
        + (
            f"0.90 reached at nprobe={sweep[hit]} (<= {0.2 * k_parts:.0f}), "
            f"{lats[hit]:.2f} ms/query there (reported, not gated)"
            if hit is not None
            else "0.90 never reached"
        )
        + f", monotone={monotone}"
    )
    verdict(3, "recall operating point", ok, detail)


def test_c04_hybrid_recall_guarantees(work):
    rng = np.random.default_rng(4)
    n = 20_000
    X = clustered_dataset(rng, n, 16, blobs=24)
    years = rng.integers(0, 1000, size=n)
    palette = ["red", "green", "blue", "cyan", "plum", "gray", "teal", "gold"]
    colors = rng.choice(palette, size=n)
    vocab = [f"t{j:02d}" for j in range(30)]
    tok_pairs = [rng.choice(30, size=2, replace=False) for _ in range(n)]
    tok_mask = {t: np.zeros(n, dtype=bool) for t in vocab}
    for i, (a, b) in enumerate(tok_pairs):
        tok_mask[vocab[a]][i] = True
        tok_mask[vocab[b]][i] = True

    db = Database.open(
        str(work / "tagged20k.mvec"),
        dimension=16,
        schema={"year": "int", "color": "str", "tags": "tokens"},
    )
    fill(
        db,
        X,
        attrs_fn=lambda i: {
            "year": int(years[i]),
            "color": str(colors[i]),
            "tags": f"{vocab[tok_pairs[i][0]]} {vocab[tok_pairs[i][1]]}",
        },
    )
    db.build(target_size=100, seed=0)
    snap = db.snapshot()

    def random_predicate():
        while True:
            kind = rng.integers(0, 7)
            y = int(rng.integers(1, 1000))
            c = str(rng.choice(palette))
            t = str(rng.choice(vocab))
            if kind == 0:
                text, mask = f"year < {y}", years < y
            elif kind == 1:
                text, mask = f"year >= {y}", years >= y
            elif kind == 2:
                text, mask = f"color = '{c}'", colors == c
            elif kind == 3:
                text, mask = f"color != '{c}'", colors != c
            elif kind == 4:
                text, mask = f"tags CONTAINS '{t}'", tok_mask[t]
            elif kind == 5:
                text, mask = f"year < {y} AND color = '{c}'", (years < y) & (colors == c)
            else:
                text, mask = f"tags CONTAINS '{t}' OR color = '{c}'", tok_mask[t] | (colors == c)
            if mask.any():
                return parse_predicate(text), mask

    non_perfect = 0
    violations = 0
    for _ in range(1000):
        node, mask = random_predicate()
        q = X[int(rng.integers(0, n))] + rng.normal(scale=0.25, size=16)
        want = filtered_topk_ids(X, mask, q, 10)
        got = prefilter_search(snap, q, 10, node).vector_ids()
        if recall(got, want) != 1.0:
            non_perfect += 1
        hyb, _choice = hybrid_search(snap, q, 10, 8, node)
        for hit in hyb:
            if not mask[hit.vector_id - 1]:
                violations += 1
    db.close()
    verdict(
        4,
        "prefilter exact, hybrid sound",
        non_perfect == 0 and violations == 0,
        f"1000 random hybrid queries on 20k rows: {non_perfect} prefilter recalls below 1.000, "
        f"{violations} predicate violations in optimizer results",
    )


def test_c05_optimizer_crossover(work):
    # Token bins with document frequencies 1..100k give selectivities
    # 1e-5..1.0 around the plan crossover F_ivf = 16*100/100k = 0.016.
    rng = np.random.default_rng(5)
    n = 100_000
    X = clustered_dataset(rng, n, 16, blobs=64)
    dfs = [1, 10, 100, 1_000, 10_000, 100_000]
    bins = [f"b{j}" for j in range(len(dfs))]

    def tags_for(i):
        return " ".join(b for b, df in zip(bins, dfs) if i < df)

    db = Database.open(str(work / "tok100k.mvec"), dimension=16, schema={"tags": "tokens"})
    fill(db, X, attrs_fn=lambda i: {"tags": tags_for(i)})
    db.build(target_size=100, seed=0)  # k = 1000
    snap = db.snapshot()
    nprobe, K, per_bin = 16, 10, 30

    prefilter_search(snap, X[0].astype(np.float64), K, parse_predicate("tags CONTAINS 'b0'"))
    results, ok, k_parts = [], True, len(snap.centroids()[0])
    for b, df in zip(bins, dfs):
        node = parse_predicate(f"tags CONTAINS '{b}'")
        mask = np.zeros(n, dtype=bool)
        mask[:df] = True
        # More latency samples on the cheap bins, where a single scheduler
        # spike would otherwise dominate a pass; recall uses a fixed 30.
        n_lat = max(per_bin, min(200, 200_000 // max(df, 1)))
        lq = X[rng.integers(0, n, size=n_lat)] + rng.normal(scale=0.25, size=(n_lat, 16)).astype(
            np.float32
        )
        queries = lq[:per_bin]
        wants = [filtered_topk_ids(X, mask, q, K) for q in queries]  # oracle work outside timing
        plans = {
            "pre": lambda q: prefilter_search(snap, q, K, node).vector_ids(),
            "post": lambda q: postfilter_search(snap, q, K, nprobe, node).vector_ids(),
            "opt": lambda q: hybrid_search(snap, q, K, nprobe, node)[0].vector_ids(),
        }
        rec = {p: [recall(run(q), w) for q, w in zip(queries, wants)] for p, run in plans.items()}
        lat = {}
        gc.disable()  # a collection pause dwarfs the microsecond plans
        try:
            # Whole warm passes per plan, best of 3: drift between passes is
            # environment noise, not plan cost.
            for p, run in plans.items():
                best = float("inf")
                for _pass in range(3):
                    t0 = time.perf_counter()
                    for q in lq:
                        run(q)
                    best = min(best, time.perf_counter() - t0)
                lat[p] = best / n_lat
        finally:
            gc.enable()
        m = {p: float(np.mean(rec[p])) for p in rec}
        cheaper = min(lat["pre"], lat["post"])
        bin_ok = m["opt"] >= m["post"] - 1e-12 and lat["opt"] <= 1.2 * cheaper
        ok = ok and bin_ok
        results.append(
            f"df={df}: recall pre/post/opt {m['pre']:.2f}/{m['post']:.2f}/{m['opt']:.2f}, "
            f"latency x{lat['opt'] / cheaper:.2f} of cheaper plan"
        )
    db.close()
    verdict(
        5,
        "optimizer tracks the better plan",
        ok,
        f"k={k_parts}, nprobe={nprobe}; " + "; ".join(results),
    )


def test_c06_batch_equivalence_and_amortization(big100k):
    db, X, rng = big100k
    snap = db.snapshot()
    mismatch = 0
    for m in (2, 16, 64, 512):
        Q = X[rng.integers(0, len(X), size=m)] + rng.normal(scale=0.25, size=(m, 32)).astype(
            np.float32
        )
        batched = execute_batch(snap, QueryBatch(Q, k=10, nprobe=8))
        for qi in range(m):
            single = ann_search(snap, SearchRequest(Q[qi], 10, 8))
            if batched[qi].vector_ids() != single.vector_ids():
                mismatch += 1
            elif not np.allclose(
                [h.distance for h in batched[qi]], [h.distance for h in single], rtol=1e-9
            ):
                mismatch += 1

    Q = X[rng.integers(0, len(X), size=512)] + rng.normal(scale=0.25, size=(512, 32)).astype(
        np.float32
    )
    report = BatchReport()
    t0 = time.perf_counter()
    execute_batch(snap, QueryBatch(Q, k=10, nprobe=8), report=report)
    batch_ms = (time.perf_counter() - t0) * 1e3
    plan = plan_batch(snap, QueryBatch(Q, k=10, nprobe=8))
    sequential_scans = 512 * (8 + 1)  # nprobe partitions plus the delta store each
    shared = sum(len(g) for g in plan.values()) > len(plan)
    t0 = time.perf_counter()
    for q in Q:
        ann_search(snap, SearchRequest(q, 10, 8))
    seq_ms = (time.perf_counter() - t0) * 1e3
    ok = mismatch == 0 and shared and report.partitions_scanned < sequential_scans
    verdict(
        6,
        "batch equals sequential and amortizes scans",
        ok,
        f"batches 2/16/64/512: {mismatch} result mismatches; 512-batch scanned "
        f"{report.partitions_scanned} distinct partitions vs {sequential_scans} sequential; "
        f"amortized {batch_ms / 512:.2f} ms/query vs {seq_ms / 512:.2f} single "
        f"({(1 - batch_ms / seq_ms) * 100:.0f}% reduction, reported not gated)",
    )


def test_c07_clustering_memory_bound(work, ds16):
    X = ds16
    rng = np.random.default_rng(7)
    queries = X[rng.integers(0, len(X), size=100)] + rng.normal(scale=0.25, size=(100, 16)).astype(
        np.float32
    )
    gt = [exact_topk_ids(X, q, 100) for q in queries]
    k = plan_cluster_count(len(X), 100)
    lines, ok, recalls = [], True, []
    for s in (40, 1_000, 10_000):  # 0.04%, 1%, 10% of N
        db = Database.open(str(work / f"mem{s}.mvec"), dimension=16)
        fill(db, X)
        report = db.build(target_size=100, batch_size=s, iterations=30, seed=0, nprobe_target=16)
        peak = report.cluster_report["peak_resident_vectors"]
        bound = s + k + 16
        ok = ok and peak <= bound
        snap = db.snapshot()
        n = auto_nprobe(snap)  # same scanned-row budget for every s
        r = float(
            np.mean(
                [
                    recall(ann_search(snap, SearchRequest(q, 100, n)).vector_ids(), gt[qi])
                    for qi, q in enumerate(queries)
                ]
            )
        )
        recalls.append(r)
        lines.append(f"s={s}: peak {peak} <= {bound}, recall@100 {r:.3f} at nprobe={n}")
        db.close()
    spread = max(recalls) - min(recalls)
    ok = ok and spread < 0.05
    verdict(
        7,
        "mini-batch memory bound",
        ok,
        "; ".join(lines) + f"; recall spread {spread:.3f} < 0.05",
    )


def test_c08_incremental_maintenance(work, ds16):
    X = ds16
    rng = np.random.default_rng(8)
    boot, step, epochs = 50_000, 3_000, 10
    stores = {}
    for name in ("inc", "reb"):
        db = Database.open(str(work / f"{name}.mvec"), dimension=16)
        fill(db, X[:boot])
        db.build(target_size=100, seed=0, nprobe_target=16)  # k=500, baseline avg 100
        stores[name] = db
    queries = X[rng.integers(0, boot, size=64)] + rng.normal(scale=0.25, size=(64, 16)).astype(
        np.float32
    )
    policy = MaintenancePolicy(growth_threshold=0.5)
    ok, first_trigger, lines = True, None, []
    for e in range(1, epochs + 1):
        lo, hi = boot + (e - 1) * step, boot + e * step
        for db in stores.values():
            fill(db, X[lo:hi], start=lo)
        wA = flush_delta(stores["inc"].store).row_writes
        wB = full_rebuild(
            stores["reb"].store, ClusteringConfig(target_size=100, seed=0), nprobe_target=16
        ).row_writes
        gt = [exact_topk_ids(X[:hi], q, 100) for q in queries]
        recs = {}
        for name, db in stores.items():
            snap = db.snapshot()
            n = auto_nprobe(snap)
            recs[name] = float(
                np.mean(
                    [
                        recall(ann_search(snap, SearchRequest(q, 100, n)).vector_ids(), gt[qi])
                        for qi, q in enumerate(queries)
                    ]
                )
            )
        stats = compute_stats(stores["inc"].snapshot(), policy)
        trig = should_rebuild(stats, policy)
        crossed = stats.growth_ratio >= 0.5
        if trig and first_trigger is None:
            first_trigger = e
        epoch_ok = recs["inc"] >= recs["reb"] - 0.05 and wA < 0.10 * wB and trig == crossed
        ok = ok and epoch_ok
        lines.append(
            f"e{e}: recall inc/reb {recs['inc']:.3f}/{recs['reb']:.3f}, "
            f"writes {wA}/{wB}, growth {stats.growth_ratio:.2f} trigger={trig}"
        )
    # avg partition size is exactly 100+6e after each flush, so growth crosses
    # 0.5 first at epoch 9 (0.54)
    ok = ok and first_trigger == 9
    for db in stores.values():
        db.close()
    verdict(8, "incremental flush tracks full rebuild", ok, "; ".join(lines))


def audit(path):
    """Reopen after a crash and read back every row; returns structural facts.
    Any corruption (bad magic, CRC mismatch, torn extent) raises instead."""
    store = VectorStore.open(str(path), DbConfig())
    snap = store.begin_snapshot()
    vids, prefixes = [], {}
    for pid in list(snap.partition_sizes()):
        for rec in snap.iter_records(pid):
            vids.append(rec.vector_id)
            prefixes[rec.asset_id.split(":")[0]] = prefixes.get(rec.asset_id.split(":")[0], 0) + 1
    table = snap.centroids()
    facts = {
        "total": snap.total_rows(),
        "delta": snap.partition_count(DELTA_PARTITION),
        "k": None if table is None else len(table[0]),
        "unique": len(set(vids)) == len(vids),
        "prefixes": prefixes,
    }
    store.close()
    return facts


def test_c09_crash_atomicity(work):
    rng = np.random.default_rng(9)
    template = work / "crash_template.mvec"
    db = Database.open(str(template), dimension=16)
    fill(db, clustered_dataset(rng, 2000, 16, blobs=10), prefix="base")
    db.build(target_size=100, seed=0)  # k=20
    fill(db, rng.normal(size=(500, 16)).astype(np.float32), prefix="delta")
    db.close()

    def crash_op(store, op, seed):
        r = np.random.default_rng(seed)
        if op == "upsert":
            txn = store.begin_write()
            for i in range(1000):
                txn.upsert_vectors(f"new:{i}", [r.normal(size=16).astype(np.float32)])
            txn.commit()
        elif op == "flush":
            flush_delta(store)
        else:
            full_rebuild(store, ClusteringConfig(target_size=100, seed=seed))

    injections, corruptions, rounds = 0, 0, 17
    for op in ("upsert", "flush", "rebuild"):
        for point in KILL_POINTS:
            for rnd in range(rounds):
                wpath = work / "crash_run.mvec"
                jpath = wpath.parent / (wpath.name + ".journal")
                jpath.unlink(missing_ok=True)  # never leak journals across rounds
                shutil.copy(template, wpath)
                tjournal = template.parent / (template.name + ".journal")
                if tjournal.exists():
                    shutil.copy(tjournal, jpath)
                if op != "upsert":  # vary the pre-crash state a little
                    store = VectorStore.open(str(wpath), DbConfig())
                    txn = store.begin_write()
                    rv = np.random.default_rng(rnd)
                    for i in range(50):
                        txn.upsert_vectors(f"extra:{rnd}:{i}", [rv.normal(size=16).astype(np.float32)])
                    txn.commit()
                    store.close()
                pre = audit(wpath)
                store = VectorStore.open(str(wpath), DbConfig())
                store.kill_points.add(point)
                try:
                    crash_op(store, op, seed=1000 + rnd)
                except InjectedCrash:
                    injections += 1
                finally:
                    store.close()
                try:
                    facts = audit(wpath)
                    if not facts["unique"]:
                        corruptions += 1
                    elif op == "upsert":
                        if facts["total"] not in (pre["total"], pre["total"] + 1000):
                            corruptions += 1
                        elif facts["prefixes"].get("new", 0) not in (0, 1000):
                            corruptions += 1
                    elif op == "flush":
                        if facts["total"] != pre["total"] or facts["delta"] not in (pre["delta"], 0):
                            corruptions += 1
                    else:
                        if facts["total"] != pre["total"] or facts["delta"] not in (pre["delta"], 0):
                            corruptions += 1
                        elif facts["k"] not in (pre["k"], plan_cluster_count(pre["total"], 100)):
                            corruptions += 1
                except Exception:
                    corruptions += 1
    verdict(
        9,
        "crash atomicity at every kill point",
        injections >= 200 and corruptions == 0,
        f"{injections} injected crashes across {len(KILL_POINTS)} kill points x 3 operations, "
        f"{corruptions} corruption events",
    )


def test_c10_concurrency_contract(work):
    rng = np.random.default_rng(10)
    db = Database.open(str(work / "concurrent.mvec"), dimension=16)
    fill(db, clustered_dataset(rng, 5000, 16, blobs=12))
    sentinels = [f"s:{i}" for i in range(8)]
    q_s = np.zeros(16)
    q_s[0] = 120.0  # far outside the data cloud, so top-8 is always the sentinels

    def write_version(v):
        row = np.zeros(16, dtype=np.float32)
        row[0] = 120.0 + 0.5 * v  # distance encodes the version: d = (v/2)^2
        db.upsert_many((a, [row], None) for a in sentinels)

    write_version(1)
    db.build(target_size=100, seed=0)
    stop = threading.Event()
    violations: list[str] = []
    iterations = [0] * 8

    def reader(slot):
        r = np.random.default_rng(100 + slot)
        while not stop.is_set():
            rs = ann_search(db.snapshot(), SearchRequest(q_s, 8, nprobe=1_000_000))
            seen = sorted(h.asset_id for h in rs)
            versions = {round(2.0 * np.sqrt(h.distance)) for h in rs}
            if seen != sentinels:
                violations.append(f"reader {slot}: asset set {seen}")
            elif len(versions) != 1:
                violations.append(f"reader {slot}: mixed versions {sorted(versions)}")
            probe = ann_search(db.snapshot(), SearchRequest(r.normal(size=16), 10, nprobe=4))
            d = [h.distance for h in probe]
            if d != sorted(d):
                violations.append(f"reader {slot}: unsorted result")
            iterations[slot] += 1

    threads = [threading.Thread(target=reader, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    commits = 0
    for v in range(2, 42):
        write_version(v)
        commits += 1
        if v % 7 == 0:
            fill(db, rng.normal(size=(150, 16)).astype(np.float32), prefix=f"noise{v}")
            commits += 1
        if v % 11 == 0:
            db.flush()
            commits += 1
        if v in (17, 34):
            db.build(target_size=100, seed=v)
            commits += 1
    stop.set()
    for t in threads:
        t.join()
    db.close()
    total_reads = sum(iterations)
    verdict(
        10,
        "readers see one snapshot at a time",
        not violations and total_reads >= 160 and min(iterations) > 0,
        f"8 readers, {total_reads} consistency checks during {commits} interleaved commits "
        f"(upserts, flushes, rebuilds); {len(violations)} violations"
        + (f"; first: {violations[0]}" if violations else ""),
    )
