"""Command-line harness: ingest, build, query, bench, maintain.

Flags can come from three places, in priority order: the command line, a
JSON config file (--config, keys named like the long flags with underscores),
and for --db the MICRONN_DB environment variable. Exit codes: 0 success,
2 validation/input error, 3 storage or corruption error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import threading
import time
from dataclasses import asdict

import numpy as np

from .batch import BatchReport
from .db import Database
from .formats import FormatError, iter_attr_jsonl, iter_fvecs, read_fvecs, read_ivecs
from .hybrid import parse_predicate, prefilter_search, type_check
from .search import SearchRequest, ann_search, knn_exact
from .storage import StorageError, ValidationError

COMMIT_ROWS = 8192  # ingest commit granularity: bounds the staged-row memory


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValidationError("config file must hold a JSON object")
    return cfg


def _pick(args, cfg: dict, name: str, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    if name in cfg:
        return cfg[name]
    return default


def _db_path(args, cfg: dict) -> str:
    path = _pick(args, cfg, "db") or os.environ.get("MICRONN_DB")
    if not path:
        raise ValidationError("no database path: pass --db, set it in --config, or set MICRONN_DB")
    return path


def _parse_schema(spec) -> dict[str, str]:
    if spec is None:
        return {}
    if isinstance(spec, dict):
        return dict(spec)
    out = {}
    for part in str(spec).split(","):
        part = part.strip()
        if not part:
            continue
        col, sep, typ = part.partition(":")
        if not sep:
            raise ValidationError(f"schema entry {part!r} must look like name:type")
        out[col.strip()] = typ.strip()
    return out


def _emit(obj) -> None:
    print(json.dumps(obj, separators=(",", ":"), sort_keys=True))


def _hits_json(results) -> list[dict]:
    return [
        {"asset_id": h.asset_id, "vector_id": h.vector_id, "distance": h.distance}
        for h in results.hits
    ]


# ---------------------------------------------------------------- commands


def cmd_ingest(args) -> int:
    cfg = _load_config(args.config)
    path = _db_path(args, cfg)
    metric = _pick(args, cfg, "metric", "l2")
    prefix = _pick(args, cfg, "asset_prefix", "vec")
    schema = _parse_schema(_pick(args, cfg, "schema"))
    attrs_path = _pick(args, cfg, "attrs")

    attr_it = iter_attr_jsonl(attrs_path) if attrs_path else None
    db: Database | None = None
    count = 0
    try:
        pending = 0
        txn = None
        for block in iter_fvecs(args.input):
            if db is None:
                db = Database.open(path, dimension=block.shape[1], metric=metric, schema=schema)
            for row in block:
                if attr_it is not None:
                    try:
                        asset_id, values = next(attr_it)
                    except StopIteration:
                        raise ValidationError(
                            f"attrs file ended at row {count}: one line per vector required"
                        ) from None
                else:
                    asset_id, values = f"{prefix}:{count}", None
                if txn is None:
                    txn = db.store.begin_write()
                txn.upsert_vectors(asset_id, row, values)
                count += 1
                pending += 1
                if pending >= COMMIT_ROWS:
                    txn.commit()
                    txn, pending = None, 0
        if txn is not None:
            txn.commit()
            txn = None
        if attr_it is not None:
            leftover = next(attr_it, None)
            if leftover is not None:
                raise ValidationError("attrs file has more lines than the vector file has rows")
    except BaseException:
        if db is not None and txn is not None:
            txn.rollback()
        raise
    finally:
        if db is not None:
            db.close()
    if db is None:
        raise ValidationError(f"{args.input}: no vectors to ingest")
    _emit({"ingested": count, "dimension": db.dimension, "metric": db.metric.tag_name})
    return 0


def cmd_build(args) -> int:
    cfg = _load_config(args.config)
    with Database.open(_db_path(args, cfg)) as db:
        report = db.build(
            target_size=int(_pick(args, cfg, "target_size", 100)),
            batch_size=_pick(args, cfg, "minibatch"),
            iterations=int(_pick(args, cfg, "iters", 30)),
            balance_weight=float(_pick(args, cfg, "balance", 1.0)),
            seed=int(_pick(args, cfg, "seed", 0)),
            nprobe_target=_pick(args, cfg, "nprobe_target"),
        )
        _emit(
            {
                "k": report.k,
                "rows": report.n_rows,
                "row_writes": report.row_writes,
                "cluster": report.cluster_report,
            }
        )
    return 0


def _resolve_nprobe(db: Database, raw) -> int:
    if isinstance(raw, str) and raw.strip().lower() == "auto":
        return db.auto_nprobe()
    return int(raw)


def _run_queries(db: Database, queries: np.ndarray, args, cfg) -> list[dict]:
    k = int(_pick(args, cfg, "k", 10))
    exact = bool(_pick(args, cfg, "exact", False))
    explain = bool(_pick(args, cfg, "explain", False))
    filt = _pick(args, cfg, "filter")
    batched = bool(_pick(args, cfg, "batch", False))
    workers = _pick(args, cfg, "workers")
    if workers is not None:
        workers = int(workers)
    node = parse_predicate(filt) if filt else None
    if node is not None:
        type_check(node, db.schema)
    if batched and (exact or node is not None):
        raise ValidationError("--batch cannot be combined with --exact or --filter")
    nprobe = None
    if not exact:
        nprobe = _resolve_nprobe(db, _pick(args, cfg, "nprobe", 8))

    lines: list[dict] = []
    if batched:
        results = db.search_batch(queries, k=k, nprobe=nprobe, workers=workers)
        for i, res in enumerate(results):
            line = {"query": i, "results": _hits_json(res)}
            if explain:
                line["plan"] = {"mode": "batch", "nprobe": nprobe, "batch_size": len(results)}
            lines.append(line)
        return lines
    for i, q in enumerate(queries):
        snap = db.snapshot()
        if node is not None and exact:
            res = prefilter_search(snap, q, k, node)
            plan = {"mode": "prefilter", "exact": True}
        elif node is not None:
            res, choice = db.hybrid(q, node, k=k, nprobe=nprobe, workers=workers)
            plan = {"mode": "hybrid", "nprobe": nprobe, **choice.as_dict()}
        elif exact:
            res = knn_exact(snap, q, k, workers)
            plan = {"mode": "exact"}
        else:
            res = ann_search(snap, SearchRequest(q, k, nprobe), workers)
            plan = {"mode": "ann", "nprobe": nprobe}
        line = {"query": i, "results": _hits_json(res)}
        if explain:
            line["plan"] = plan
        lines.append(line)
    return lines


def cmd_query(args) -> int:
    cfg = _load_config(args.config)
    with Database.open(_db_path(args, cfg)) as db:
        if bool(_pick(args, cfg, "purge_cache", False)):
            db.reopen()
        queries = read_fvecs(args.query)
        lines = _run_queries(db, queries, args, cfg)
        readers = int(_pick(args, cfg, "readers", 0) or 0)
        if readers > 0:
            baseline = [[h["vector_id"] for h in ln["results"]] for ln in lines]
            failures: list[str] = []

            def reader(idx: int) -> None:
                got = _run_queries(db, queries, args, cfg)
                ids = [[h["vector_id"] for h in ln["results"]] for ln in got]
                if ids != baseline:
                    failures.append(f"reader {idx} diverged from the first pass")

            threads = [threading.Thread(target=reader, args=(i,)) for i in range(readers)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            if failures:
                raise StorageError("; ".join(failures))
        for line in lines:
            _emit(line)
    return 0


def _percentile(values: list[float], p: float) -> float:
    return float(np.percentile(np.asarray(values), p)) if values else 0.0


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    with Database.open(_db_path(args, cfg)) as db:
        if bool(_pick(args, cfg, "purge_cache", False)):
            db.reopen()
        queries = read_fvecs(args.queries)
        k = int(_pick(args, cfg, "k", 100))
        gt_path = _pick(args, cfg, "ground_truth")
        compute_gt = bool(_pick(args, cfg, "compute_gt", False))
        if (gt_path is None) == (not compute_gt):
            raise ValidationError("bench needs exactly one of --ground-truth or --compute-gt")
        if compute_gt:
            gt = [set(knn_exact(db.snapshot(), q, k).vector_ids()) for q in queries]
        else:
            rows = read_ivecs(gt_path)
            if rows.shape[0] != queries.shape[0]:
                raise ValidationError(
                    f"ground truth has {rows.shape[0]} rows for {queries.shape[0]} queries"
                )
            if rows.shape[1] < k:
                raise ValidationError(f"ground truth depth {rows.shape[1]} < K={k}")
            gt = [set(int(v) for v in row[:k]) for row in rows]

        sweep = [int(x) for x in str(_pick(args, cfg, "nprobe_sweep", "8")).split(",") if x.strip()]
        batch_sizes = _pick(args, cfg, "batch_sizes")
        if batch_sizes:
            batch_sizes = [int(x) for x in str(batch_sizes).split(",") if x.strip()]
        snap = db.snapshot()
        base = {
            "dataset": db.path,
            "n": snap.total_rows(),
            "d": db.dimension,
            "metric": db.metric.tag_name,
            "k": k,
        }
        report_rows = []
        for nprobe in sweep:
            recalls, lat = [], []
            scans0 = db.counters.snapshot()["partition_scans"]
            for qi, q in enumerate(queries):
                t0 = time.perf_counter()
                res = db.search(q, k=k, nprobe=nprobe)
                lat.append((time.perf_counter() - t0) * 1e3)
                hit = set(res.vector_ids()[:k])
                recalls.append(len(hit & gt[qi]) / k)
            report_rows.append(
                {
                    **base,
                    "mode": "single",
                    "nprobe": nprobe,
                    "batch_size": 1,
                    "recall_mean": float(np.mean(recalls)),
                    "latency_p50_ms": _percentile(lat, 50),
                    "latency_p95_ms": _percentile(lat, 95),
                    "latency_mean_ms": float(np.mean(lat)),
                    "partitions_scanned": db.counters.snapshot()["partition_scans"] - scans0,
                    "row_writes": 0,
                }
            )
        for b in batch_sizes or []:
            nprobe = sweep[-1]
            m = (len(queries) // b) * b
            if m == 0:
                continue
            recalls, lat = [], []
            scans0 = db.counters.snapshot()["partition_scans"]
            for start in range(0, m, b):
                chunk = queries[start : start + b]
                t0 = time.perf_counter()
                results = db.search_batch(chunk, k=k, nprobe=nprobe, report=BatchReport())
                dt = (time.perf_counter() - t0) * 1e3
                lat.extend([dt / len(chunk)] * len(chunk))
                for qi, res in enumerate(results, start=start):
                    recalls.append(len(set(res.vector_ids()[:k]) & gt[qi]) / k)
            report_rows.append(
                {
                    **base,
                    "mode": "batch",
                    "nprobe": nprobe,
                    "batch_size": b,
                    "recall_mean": float(np.mean(recalls)),
                    "latency_p50_ms": _percentile(lat, 50),
                    "latency_p95_ms": _percentile(lat, 95),
                    "latency_mean_ms": float(np.mean(lat)),
                    "partitions_scanned": db.counters.snapshot()["partition_scans"] - scans0,
                    "row_writes": 0,
                }
            )
        _emit({"bench": report_rows})
        csv_path = _pick(args, cfg, "csv")
        if csv_path:
            cols = [
                "dataset", "n", "d", "metric", "mode", "nprobe", "batch_size", "k",
                "recall_mean", "latency_p50_ms", "latency_p95_ms", "latency_mean_ms",
                "partitions_scanned", "row_writes",
            ]
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.DictWriter(fh, fieldnames=cols)
                w.writeheader()
                w.writerows({c: row[c] for c in cols} for row in report_rows)
    return 0


def cmd_maintain(args) -> int:
    cfg = _load_config(args.config)
    with Database.open(_db_path(args, cfg)) as db:
        action = args.action
        if action == "flush":
            _emit(asdict(db.flush()))
        elif action == "rebuild":
            report = db.build(
                target_size=int(_pick(args, cfg, "target_size", 100)),
                batch_size=_pick(args, cfg, "minibatch"),
                iterations=int(_pick(args, cfg, "iters", 30)),
                balance_weight=float(_pick(args, cfg, "balance", 1.0)),
                seed=int(_pick(args, cfg, "seed", 0)),
                nprobe_target=_pick(args, cfg, "nprobe_target"),
            )
            _emit(
                {
                    "k": report.k,
                    "rows": report.n_rows,
                    "row_writes": report.row_writes,
                    "cluster": report.cluster_report,
                }
            )
        elif action == "stats":
            _emit(db.stats().as_dict())
        elif action == "auto":
            rep = db.auto_maintain(float(_pick(args, cfg, "growth_threshold", 0.5)))
            _emit(
                {
                    "flush": asdict(rep.flush),
                    "rebuilt": rep.rebuilt,
                    "rebuild": None
                    if rep.rebuild is None
                    else {
                        "k": rep.rebuild.k,
                        "rows": rep.rebuild.n_rows,
                        "row_writes": rep.rebuild.row_writes,
                    },
                    "stats": rep.stats.as_dict(),
                }
            )
        else:
            raise ValidationError(f"unknown maintenance action {action!r}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--db", help="database file (default: $MICRONN_DB)")
    common.add_argument("--config", help="JSON config file mirroring the flags")

    p = argparse.ArgumentParser(prog="mvec", description="Embedded IVF vector database")
    sub = p.add_subparsers(dest="command", required=True)

    pi = sub.add_parser("ingest", parents=[common], help="stream an fvecs file into the store")
    pi.add_argument("--input", required=True, help="fvecs vector file")
    pi.add_argument("--metric", choices=["l2", "cosine"], default=None)
    pi.add_argument("--attrs", help="JSONL attribute file, one line per vector")
    pi.add_argument("--asset-prefix", dest="asset_prefix", help="asset id prefix (default vec)")
    pi.add_argument("--schema", help="attribute schema, e.g. 'price:float,tags:tokens'")
    pi.set_defaults(func=cmd_ingest)

    pb = sub.add_parser("build", parents=[common], help="build the IVF index")
    pb.add_argument("--target-size", dest="target_size", type=int)
    pb.add_argument("--minibatch", type=int, help="mini-batch size (default min(10k, N))")
    pb.add_argument("--iters", type=int)
    pb.add_argument("--balance", type=float, help="balance penalty weight")
    pb.add_argument("--seed", type=int)
    pb.add_argument("--nprobe-target", dest="nprobe_target", type=int,
                    help="record a scan budget of nprobe_target partitions at build size")
    pb.set_defaults(func=cmd_build)

    pq = sub.add_parser("query", parents=[common], help="run queries from an fvecs file")
    pq.add_argument("--query", required=True, help="fvecs query file")
    pq.add_argument("--k", type=int)
    pq.add_argument("--nprobe", help="partitions to scan, or 'auto'")
    pq.add_argument("--exact", action="store_true", default=None)
    pq.add_argument("--filter", help="attribute predicate expression")
    pq.add_argument("--batch", action="store_true", default=None,
                    help="run the whole file as one multi-query batch")
    pq.add_argument("--explain", action="store_true", default=None)
    pq.add_argument("--workers", type=int)
    pq.add_argument("--readers", type=int,
                    help="replay the query set on N concurrent readers and compare")
    pq.add_argument("--purge-cache", dest="purge_cache", action="store_true", default=None)
    pq.set_defaults(func=cmd_query)

    pn = sub.add_parser("bench", parents=[common], help="recall/latency benchmark")
    pn.add_argument("--queries", required=True, help="fvecs query file")
    pn.add_argument("--ground-truth", dest="ground_truth", help="ivecs exact top-K vector ids")
    pn.add_argument("--compute-gt", dest="compute_gt", action="store_true", default=None)
    pn.add_argument("--k", type=int)
    pn.add_argument("--nprobe-sweep", dest="nprobe_sweep", help="comma list, e.g. 1,2,4,8")
    pn.add_argument("--batch-sizes", dest="batch_sizes", help="comma list of batch sizes")
    pn.add_argument("--csv", help="also write the report rows to this CSV file")
    pn.add_argument("--purge-cache", dest="purge_cache", action="store_true", default=None)
    pn.set_defaults(func=cmd_bench)

    pm = sub.add_parser("maintain", parents=[common], help="flush/rebuild/stats/auto")
    pm.add_argument("action", choices=["flush", "rebuild", "stats", "auto"])
    pm.add_argument("--growth-threshold", dest="growth_threshold", type=float)
    pm.add_argument("--target-size", dest="target_size", type=int)
    pm.add_argument("--minibatch", type=int)
    pm.add_argument("--iters", type=int)
    pm.add_argument("--balance", type=float)
    pm.add_argument("--seed", type=int)
    pm.add_argument("--nprobe-target", dest="nprobe_target", type=int)
    pm.set_defaults(func=cmd_maintain)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (StorageError, OSError) as exc:
        print(f"storage error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
