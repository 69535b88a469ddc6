"""Attribute predicates, per-column statistics, and the two-plan optimizer.

A hybrid query carries a predicate over declared attribute columns. Two
executors exist: pre-filtering evaluates the predicate first over attribute
indexes and brute-forces exactly the qualifying vectors (recall 1.0 by
construction); post-filtering runs the normal IVF partition scans with the
predicate applied inline, which is cheap but can miss qualifying vectors in
unscanned partitions. The optimizer picks pre-filtering exactly when the
estimated predicate selectivity is below the estimated IVF scan selectivity
(nprobe * avg_partition_size / row_count).

Predicate grammar (CLI surface):
    expr := atom | expr AND expr | expr OR expr | (expr)
    atom := ident op literal | ident CONTAINS 'token'
with op in {=, !=, <, >, <=, >=}; literals are ints, floats, or quoted
strings (single or double quotes). AND binds tighter than OR.
"""

from __future__ import annotations

import bisect
import json
import re
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .kernel import TopKHeap, merge_heaps
from .search import (
    ResultSet,
    SearchHit,
    SearchRequest,
    _query_f64,
    ann_search,
    block_distances,
    offer_block,
)
from .storage import DELTA_PARTITION, Snapshot

HISTOGRAM_BUCKETS = 64
TOP_STRING_VALUES = 64
ZERO_FLOOR_FRACTION = 1e-6


class PredicateError(ValueError):
    """Parse or type error in a predicate; carries the text position."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


@dataclass(frozen=True)
class Atom:
    column: str
    op: str  # '=', '!=', '<', '>', '<=', '>=', 'CONTAINS'
    value: Union[int, float, str]


@dataclass(frozen=True)
class And:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Or:
    left: "Node"
    right: "Node"


Node = Union[Atom, And, Or]

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<lparen>\()|(?P<rparen>\))|
        (?P<op><=|>=|!=|=|<|>)|
        (?P<num>-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)|
        (?P<str>'[^']*'|"[^"]*")|
        (?P<word>[A-Za-z_][A-Za-z0-9_]*)
    )""",
    re.VERBOSE,
)


def _lex(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip() == "":
                break
            raise PredicateError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _lex(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None, len(self.text))

    def take(self):
        tok = self.peek()
        self.i += 1
        return tok

    def parse(self) -> Node:
        node = self.or_expr()
        kind, val, pos = self.peek()
        if kind is not None:
            raise PredicateError(f"trailing input {val!r}", pos)
        return node

    def or_expr(self) -> Node:
        node = self.and_expr()
        while self.peek()[:2] == ("word", "OR"):
            self.take()
            node = Or(node, self.and_expr())
        return node

    def and_expr(self) -> Node:
        node = self.primary()
        while self.peek()[:2] == ("word", "AND"):
            self.take()
            node = And(node, self.primary())
        return node

    def primary(self) -> Node:
        kind, val, pos = self.peek()
        if kind == "lparen":
            self.take()
            node = self.or_expr()
            kind, val, pos = self.take()
            if kind != "rparen":
                raise PredicateError("expected ')'", pos)
            return node
        return self.atom()

    def atom(self) -> Atom:
        kind, col, pos = self.take()
        if kind != "word" or col in ("AND", "OR", "CONTAINS"):
            raise PredicateError("expected a column name", pos)
        kind, op, pos = self.take()
        if kind == "word" and op == "CONTAINS":
            kind, lit, pos = self.take()
            if kind != "str":
                raise PredicateError("CONTAINS expects a quoted token", pos)
            token = lit[1:-1].lower()
            if len(token.split()) != 1:
                raise PredicateError("CONTAINS expects exactly one token", pos)
            return Atom(col, "CONTAINS", token)
        if kind != "op":
            raise PredicateError(f"expected a comparison operator, got {op!r}", pos)
        kind, lit, pos = self.take()
        if kind == "num":
            value = float(lit) if ("." in lit or "e" in lit or "E" in lit) else int(lit)
        elif kind == "str":
            value = lit[1:-1]
        else:
            raise PredicateError("expected a literal", pos)
        return Atom(col, op, value)


def parse_predicate(text: str) -> Node:
    if not text or not text.strip():
        raise PredicateError("empty predicate", 0)
    return _Parser(text).parse()


def type_check(node: Node, schema: dict[str, str]) -> None:
    """Validate columns, operators, and literal types against the schema."""
    if isinstance(node, (And, Or)):
        type_check(node.left, schema)
        type_check(node.right, schema)
        return
    typ = schema.get(node.column)
    if typ is None:
        raise PredicateError(f"unknown column {node.column!r}")
    if node.op == "CONTAINS":
        if typ != "tokens":
            raise PredicateError(f"CONTAINS applies only to token columns, {node.column!r} is {typ}")
        return
    if typ == "tokens":
        raise PredicateError(f"token column {node.column!r} supports only CONTAINS")
    if typ in ("int", "float") and not isinstance(node.value, (int, float)):
        raise PredicateError(f"column {node.column!r} is numeric, literal {node.value!r} is not")
    if typ == "str" and not isinstance(node.value, str):
        raise PredicateError(f"column {node.column!r} is a string column")


_NUM_OPS = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    ">": lambda a, b: a > b,
    "<=": lambda a, b: a <= b,
    ">=": lambda a, b: a >= b,
}


def evaluate(node: Node, values: dict | None) -> bool:
    """Evaluate against one asset's attribute row; missing values are false."""
    if isinstance(node, And):
        return evaluate(node.left, values) and evaluate(node.right, values)
    if isinstance(node, Or):
        return evaluate(node.left, values) or evaluate(node.right, values)
    if not values or node.column not in values:
        return False
    v = values[node.column]
    if node.op == "CONTAINS":
        return node.value in str(v).lower().split()
    return _NUM_OPS[node.op](v, node.value)


# --------------------------------------------------------------------- stats


class ColumnStats:
    """Serializable per-column statistics for selectivity estimation.

    Numeric columns get an equi-depth histogram (bucket edges, counts, and
    per-bucket distinct counts); string columns a top-value frequency table
    with a remainder; token columns the full token document-frequency map.
    """

    def __init__(self, n_vectors: int, n_assets: int, columns: dict[str, dict]):
        self.n_vectors = n_vectors
        self.n_assets = n_assets
        self.columns = columns

    def to_json(self) -> bytes:
        return json.dumps(
            {"n_vectors": self.n_vectors, "n_assets": self.n_assets, "columns": self.columns},
            separators=(",", ":"),
        ).encode("utf-8")

    @classmethod
    def from_json(cls, blob: bytes) -> "ColumnStats":
        d = json.loads(blob.decode("utf-8"))
        return cls(d["n_vectors"], d["n_assets"], d["columns"])


def _numeric_histogram(values: list[float]) -> dict:
    arr = np.sort(np.asarray(values, dtype=np.float64))
    n = len(arr)
    b = min(HISTOGRAM_BUCKETS, n)
    cuts = [int(round(i * n / b)) for i in range(b + 1)]
    edges: list[float] = []
    counts: list[int] = []
    distinct: list[int] = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        if hi <= lo:
            continue
        edges.append(float(arr[lo]))
        counts.append(hi - lo)
        distinct.append(int(len(np.unique(arr[lo:hi]))))
    edges.append(float(arr[-1]))
    return {"type": "numeric", "edges": edges, "counts": counts, "distinct": distinct, "n": n}


def build_stats(snapshot: Snapshot, schema: dict[str, str] | None = None) -> ColumnStats:
    """One pass over the attribute table; pairs with the snapshot's row count."""
    schema = schema if schema is not None else snapshot.meta.get("schema", {})
    attrs = snapshot.attrs()
    columns: dict[str, dict] = {}
    for col, typ in schema.items():
        present = [(a, row[col]) for a, row in attrs.items() if col in row]
        if typ in ("int", "float"):
            if present:
                columns[col] = _numeric_histogram([float(v) for _a, v in present])
            else:
                columns[col] = {"type": "numeric", "edges": [], "counts": [], "distinct": [], "n": 0}
        elif typ == "str":
            freq: dict[str, int] = {}
            for _a, v in present:
                freq[v] = freq.get(v, 0) + 1
            top = dict(sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:TOP_STRING_VALUES])
            rest_count = sum(freq.values()) - sum(top.values())
            rest_distinct = len(freq) - len(top)
            columns[col] = {
                "type": "string",
                "top": top,
                "rest_count": rest_count,
                "rest_distinct": rest_distinct,
                "n": len(present),
            }
        elif typ == "tokens":
            df: dict[str, int] = {}
            for _a, v in present:
                for tok in set(str(v).lower().split()):
                    df[tok] = df.get(tok, 0) + 1
            columns[col] = {"type": "tokens", "df": df, "n": len(present)}
    return ColumnStats(snapshot.total_rows(), len(attrs), columns)


def _floor_rows(stats: ColumnStats) -> float:
    return max(1.0, stats.n_vectors * ZERO_FLOOR_FRACTION)


def _estimate_atom_assets(atom: Atom, stats: ColumnStats) -> float:
    col = stats.columns.get(atom.column)
    if col is None:
        return 0.0
    if col["type"] == "tokens":
        return float(col["df"].get(str(atom.value), 0))
    if col["type"] == "string":
        if atom.op in ("<", ">", "<=", ">="):
            return col["n"] / 3.0  # frequency tables cannot estimate string ranges
        if atom.op == "=":
            hit = col["top"].get(atom.value)
            if hit is not None:
                return float(hit)
            if col["rest_distinct"] > 0:
                return col["rest_count"] / col["rest_distinct"]
            return 0.0
        return max(0.0, col["n"] - _estimate_atom_assets(Atom(atom.column, "=", atom.value), stats))
    # numeric histogram
    edges, counts, distinct = col["edges"], col["counts"], col["distinct"]
    n = col["n"]
    if n == 0 or not counts:
        return 0.0
    v = float(atom.value)
    if atom.op == "=":
        return _rows_equal(edges, counts, distinct, v)
    if atom.op == "!=":
        return max(0.0, n - _rows_equal(edges, counts, distinct, v))
    below = _rows_below(edges, counts, v)
    at = _rows_equal(edges, counts, distinct, v)
    if atom.op == "<":
        return below
    if atom.op == "<=":
        return min(below + at, n)
    if atom.op == ">":
        return max(n - below - at, 0.0)
    return max(n - below, 0.0)


def _rows_equal(edges: list[float], counts: list[int], distinct: list[int], v: float) -> float:
    """Estimated rows equal to v: count/distinct summed over every bucket
    containing v. Heavy values span several equi-depth buckets (repeated
    edges), and each such bucket contributes its whole count."""
    if not edges or v < edges[0] or v > edges[-1]:
        return 0.0
    total = 0.0
    lo_b = bisect.bisect_left(edges, v) - 1
    for i in range(max(0, lo_b), len(counts)):
        if edges[i] > v:
            break
        if edges[i] <= v <= edges[i + 1]:
            total += counts[i] / max(1, distinct[i])
    return total


def _rows_below(edges: list[float], counts: list[int], v: float) -> float:
    """Estimated rows with value strictly below v (linear within a bucket)."""
    if v <= edges[0]:
        return 0.0
    if v > edges[-1]:
        return float(sum(counts))
    total = 0.0
    for i, c in enumerate(counts):
        lo, hi = edges[i], edges[i + 1]
        if v > hi:
            total += c
        elif v > lo:
            total += c * (v - lo) / (hi - lo) if hi > lo else 0.0
            break
        else:
            break
    return total


def estimate_rows(node: Node, stats: ColumnStats) -> float:
    """Estimated qualifying rows (vector rows), independence-combined:
    AND takes the min child cardinality, OR the sum."""
    if isinstance(node, And):
        return min(estimate_rows(node.left, stats), estimate_rows(node.right, stats))
    if isinstance(node, Or):
        return estimate_rows(node.left, stats) + estimate_rows(node.right, stats)
    assets = _estimate_atom_assets(node, stats)
    scale = stats.n_vectors / stats.n_assets if stats.n_assets else 1.0
    rows = assets * scale
    return max(rows, _floor_rows(stats))


def estimate_selectivity(node: Node, stats: ColumnStats) -> float:
    """Predicate selectivity estimate in [0, 1]; 1.0 on an empty table."""
    if stats.n_vectors == 0:
        return 1.0
    return min(estimate_rows(node, stats), stats.n_vectors) / stats.n_vectors


def ivf_selectivity(nprobe: int, partition_size: float, row_count: int) -> float:
    """Fraction of rows an nprobe-partition scan will touch, clamped to [0,1]."""
    if row_count <= 0:
        return 1.0
    return min(1.0, max(0.0, nprobe * partition_size / row_count))


# ------------------------------------------------------------ attr indexes


class AttrIndex:
    """Per-snapshot attribute indexes backing the pre-filter executor.

    Numeric columns get sorted (value, asset) arrays for range probes via
    bisect; string columns a value dictionary; token columns an inverted
    index. Built lazily once per committed state and cached on it.
    """

    def __init__(self, snapshot: Snapshot, schema: dict[str, str]):
        self.schema = schema
        self.col_assets: dict[str, set[str]] = {c: set() for c in schema}
        self.numeric: dict[str, tuple[np.ndarray, list[str]]] = {}
        self.strings: dict[str, dict[str, list[str]]] = {}
        self.tokens: dict[str, dict[str, set[str]]] = {}
        num_pairs: dict[str, list[tuple[float, str]]] = {c: [] for c in schema}
        for asset, row in snapshot.attrs().items():
            for col, v in row.items():
                typ = schema.get(col)
                if typ is None:
                    continue
                self.col_assets[col].add(asset)
                if typ in ("int", "float"):
                    num_pairs[col].append((float(v), asset))
                elif typ == "str":
                    self.strings.setdefault(col, {}).setdefault(v, []).append(asset)
                elif typ == "tokens":
                    inv = self.tokens.setdefault(col, {})
                    for tok in set(str(v).lower().split()):
                        inv.setdefault(tok, set()).add(asset)
        for col, pairs in num_pairs.items():
            if pairs:
                pairs.sort()
                self.numeric[col] = (
                    np.array([p[0] for p in pairs], dtype=np.float64),
                    [p[1] for p in pairs],
                )

    @classmethod
    def for_snapshot(cls, snapshot: Snapshot) -> "AttrIndex":
        idx = snapshot.aux.get("attr_index")
        if idx is None:
            idx = cls(snapshot, snapshot.meta.get("schema", {}))
            snapshot.aux["attr_index"] = idx
        return idx

    def eval_assets(self, node: Node) -> set[str]:
        if isinstance(node, And):
            left = self.eval_assets(node.left)
            if not left:
                return left
            return left & self.eval_assets(node.right)
        if isinstance(node, Or):
            return self.eval_assets(node.left) | self.eval_assets(node.right)
        return self._eval_atom(node)

    def _eval_atom(self, atom: Atom) -> set[str]:
        typ = self.schema.get(atom.column)
        if typ is None:
            raise PredicateError(f"unknown column {atom.column!r}")
        if atom.op == "CONTAINS":
            return set(self.tokens.get(atom.column, {}).get(str(atom.value), set()))
        if typ in ("int", "float"):
            entry = self.numeric.get(atom.column)
            if entry is None:
                return set()
            vals, assets = entry
            v = float(atom.value)
            if atom.op == "=":
                lo, hi = np.searchsorted(vals, v, "left"), np.searchsorted(vals, v, "right")
                return set(assets[lo:hi])
            if atom.op == "!=":
                lo, hi = np.searchsorted(vals, v, "left"), np.searchsorted(vals, v, "right")
                return set(assets[:lo]) | set(assets[hi:])
            if atom.op == "<":
                return set(assets[: np.searchsorted(vals, v, "left")])
            if atom.op == "<=":
                return set(assets[: np.searchsorted(vals, v, "right")])
            if atom.op == ">":
                return set(assets[np.searchsorted(vals, v, "right") :])
            return set(assets[np.searchsorted(vals, v, "left") :])
        # string column
        d = self.strings.get(atom.column, {})
        if atom.op == "=":
            return set(d.get(atom.value, ()))
        if atom.op == "!=":
            return self.col_assets[atom.column] - set(d.get(atom.value, ()))
        out: set[str] = set()
        for val, assets in d.items():
            if _NUM_OPS[atom.op](val, atom.value):
                out.update(assets)
        return out


# --------------------------------------------------------------- executors


class PlanChoice(NamedTuple):
    # NamedTuple, not dataclass: constructed on every planned query.
    choice: str  # 'prefilter' | 'postfilter'
    f_filters: float
    f_ivf: float

    def as_dict(self) -> dict:
        return {"plan": self.choice, "f_filters": self.f_filters, "f_ivf": self.f_ivf}


def prefilter_search(snapshot: Snapshot, q: np.ndarray, k: int, node: Node) -> ResultSet:
    """Evaluate the predicate via attribute indexes, then brute-force exactly
    the qualifying vectors. Recall is 1.0 against the filtered oracle."""
    type_check(node, snapshot.meta.get("schema", {}))
    return _prefilter(snapshot, q, k, node)


def _prefilter(snapshot: Snapshot, q: np.ndarray, k: int, node: Node) -> ResultSet:
    index = AttrIndex.for_snapshot(snapshot)
    assets = index.eval_assets(node)
    vids = [vid for asset in assets for vid in snapshot.asset_vector_ids(asset)]
    q64, qn = _query_f64(snapshot, q)
    q2d, qns = q64.reshape(1, -1), np.array([qn])
    heap = TopKHeap(k)
    for ids, blk_assets, block, norms in snapshot.iter_selected_blocks(vids):
        dists = block_distances(q2d, qns, block, norms, snapshot.metric)[0]
        offer_block(heap, dists, ids, blk_assets, k)
    return ResultSet([SearchHit(a, vid, d) for d, vid, a in merge_heaps([heap], k)])


def postfilter_search(
    snapshot: Snapshot,
    q: np.ndarray,
    k: int,
    nprobe: int,
    node: Node,
    workers: int | None = None,
) -> ResultSet:
    """ANN partition scans with the predicate applied inline: rows failing
    the predicate never enter a heap. May return fewer than k hits."""
    type_check(node, snapshot.meta.get("schema", {}))
    return _postfilter(snapshot, q, k, nprobe, node, workers)


def _postfilter(
    snapshot: Snapshot,
    q: np.ndarray,
    k: int,
    nprobe: int,
    node: Node,
    workers: int | None = None,
) -> ResultSet:
    attrs = snapshot.attrs()
    memo: dict[str, bool] = {}

    def predicate_fn(asset: str) -> bool:
        hit = memo.get(asset)
        if hit is None:
            hit = evaluate(node, attrs.get(asset))
            memo[asset] = hit
        return hit

    return ann_search(snapshot, SearchRequest(q, k, nprobe), workers, predicate_fn)


def load_stats(snapshot: Snapshot) -> ColumnStats:
    """Stats from the last build/flush commit, or built on the fly and cached."""
    stats = snapshot.aux.get("column_stats")
    if stats is None:
        blob = snapshot.stats_blob()
        stats = ColumnStats.from_json(blob) if blob else build_stats(snapshot)
        snapshot.aux["column_stats"] = stats
    return stats


def hybrid_search(
    snapshot: Snapshot,
    q: np.ndarray,
    k: int,
    nprobe: int,
    node: Node,
    threshold: float | None = None,
    workers: int | None = None,
) -> tuple[ResultSet, PlanChoice]:
    """Estimate both plans, run the chosen one, and return it with the choice.

    The rule is prefilter iff F_filters < F_IVF; `threshold` overrides the
    right-hand side with a fixed client-supplied cutoff.
    """
    type_check(node, snapshot.meta.get("schema", {}))
    stats = load_stats(snapshot)
    f_filters = estimate_selectivity(node, stats)
    total, avg = _plan_constants(snapshot)
    if avg is None:
        # No index: prefilter is the only plan that does not degenerate to a
        # full scan of the delta store with a filter.
        choice = PlanChoice("prefilter", f_filters, 1.0)
        return _prefilter(snapshot, q, k, node), choice
    f_ivf = ivf_selectivity(nprobe, avg, total)
    cutoff = f_ivf if threshold is None else threshold
    if f_filters < cutoff:
        return _prefilter(snapshot, q, k, node), PlanChoice("prefilter", f_filters, f_ivf)
    return (
        _postfilter(snapshot, q, k, nprobe, node, workers),
        PlanChoice("postfilter", f_filters, f_ivf),
    )


def _plan_constants(snapshot: Snapshot) -> tuple[int, float | None]:
    """(total_rows, avg main-partition size) cached per committed state; avg
    is None without an index. Keeps the per-query estimate at dict-get cost."""
    consts = snapshot.aux.get("plan_constants")
    if consts is None:
        total = snapshot.total_rows()
        table = snapshot.centroids()
        if table is None:
            consts = (total, None)
        else:
            kparts = len(table[0])
            main_rows = total - snapshot.partition_count(DELTA_PARTITION)
            consts = (total, main_rows / kparts if kparts else 0.0)
        snapshot.aux["plan_constants"] = consts
    return consts
