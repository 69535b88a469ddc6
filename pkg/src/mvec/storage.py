"""Single-file transactional record store for vectors, centroids, and attributes.

File layout
-----------
A fixed 64-byte header holds the identity block (magic ``MVEC``, format
version, dimension, metric tag, all little-endian) and the commit slot: the
sequence number, offset/length of the current manifest, the committed end of
file, and CRCs. Everything after the header is immutable append-only extents:

* vector extents: up to 256 rows of one partition (ids, asset ids, embeddings)
* attribute extents: JSON deltas of attribute upserts/deletes, folded in order
* centroid extents: either a full table or a partial overlay, folded last-wins
* stats extents: opaque blobs (column statistics)

A manifest (JSON) pins the extents that make up one committed state. Commit
appends new extents plus a manifest, fsyncs, writes a journal record to the
sidecar file, fsyncs, then rewrites the header slot in place. The header slot
rewrite is the only in-place write in the whole design; a torn slot is always
repairable from the journal. Reopen rolls the journal forward when it is newer
than the header and otherwise truncates any partial append.

Concurrency: one serialized writer (lock with a busy timeout), any number of
snapshot readers in the same process. A snapshot is a reference to an
immutable in-memory state, so readers never block and never see mixes.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import zlib
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .kernel import Metric, normalize_rows

MAGIC = b"MVEC"
FORMAT_VERSION = 1
HEADER_SIZE = 64
DELTA_PARTITION = 2**32 - 1
ROWS_PER_EXTENT = 256  # one storage region == one scan/distance block

JOURNAL_MAGIC = b"MVJL"
EXTENT_MAGIC = b"MVXT"

KIND_VECTORS = 1
KIND_ATTRS = 2
KIND_CENTROIDS = 3
KIND_STATS = 4

# Named fault-injection points inside commit(), in execution order. Tests arm
# one of these to simulate a crash; the in-process model is that bytes already
# written via os.write survive and the store object dies.
KILL_POINTS = (
    "after_data_append",
    "after_journal_write",
    "mid_header_write",
    "after_header_write",
)

_HDR_FIX = struct.Struct("<4sIIB3x")  # magic, version, dim, metric tag
_SLOT = struct.Struct("<QQQQII")  # seq, manifest_off, manifest_len, eof, manifest_crc, slot_crc
_SLOT_OFF = 16
_JREC = struct.Struct("<4sQQQQII")  # magic + slot fields + record crc
_EXT_HDR = struct.Struct("<4sB3xQI4x")  # magic, kind, payload_len, payload_crc
_VEXT_PRO = struct.Struct("<IIIIIIII")  # count, pid, dim, flags, ids_off, assets_off, emb_off, rsvd
_CEXT_PRO = struct.Struct("<II")  # count, dim

ATTR_TYPES = ("int", "float", "str", "tokens")


class StorageError(Exception):
    """Base for storage failures (I/O, corruption, busy writer)."""


class CorruptFileError(StorageError):
    pass


class BusyError(StorageError):
    """The single writer slot is held and the timeout expired."""


class ValidationError(ValueError):
    """Caller-supplied data violates the schema or dimension contract."""


class InjectedCrash(BaseException):
    """Raised at an armed kill point; derives from BaseException so the
    commit error-healing path cannot swallow it (a healed 'crash' would
    defeat the fault-injection test)."""


@dataclass
class DbConfig:
    dimension: int | None = None
    metric: Metric | str = Metric.SQUARED_L2
    schema: dict[str, str] = field(default_factory=dict)
    busy_timeout: float = 5.0
    cache_bytes: int = 256 * 1024 * 1024
    workers: int = 8
    fsync: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.metric, str):
            self.metric = Metric.from_name(self.metric)
        for col, typ in self.schema.items():
            if typ not in ATTR_TYPES:
                raise ValidationError(f"column {col!r}: unknown type {typ!r}")


@dataclass(eq=False)
class VectorRecord:
    vector_id: int
    asset_id: str
    partition_id: int
    embedding: np.ndarray  # float32, length D


@dataclass(eq=False)
class CentroidRecord:
    partition_id: int
    centroid: np.ndarray


class Counters:
    """Thread-safe instrumentation counters.

    row_writes: rows physically written into new extents (vector, centroid,
    and attribute rows all count; a rewrite counts again).
    regions_touched: extents read by partition scans.
    partition_scans: partitions scanned (per scan call, per partition).
    row_gathers: selective gathers served from the consolidated row copy.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.row_writes = 0
        self.regions_touched = 0
        self.partition_scans = 0
        self.row_gathers = 0
        self.commits = 0

    def add(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + n)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {
                "row_writes": self.row_writes,
                "regions_touched": self.regions_touched,
                "partition_scans": self.partition_scans,
                "row_gathers": self.row_gathers,
                "commits": self.commits,
            }

    def reset(self) -> None:
        with self._lock:
            self.row_writes = 0
            self.regions_touched = 0
            self.partition_scans = 0
            self.row_gathers = 0
            self.commits = 0


class ExtentRef:
    """Handle to one immutable on-disk extent.

    Vector extents eagerly carry their id table and asset ids (small); the
    embedding block is read on demand and cached at the store level.
    """

    __slots__ = ("start", "length", "count", "partition_id", "ids", "assets", "emb_off", "crc_ok")

    def __init__(self, start: int, length: int, count: int, partition_id: int | None = None):
        self.start = start
        self.length = length
        self.count = count
        self.partition_id = partition_id
        self.ids: np.ndarray | None = None  # uint64, ascending
        self.assets: list[str] | None = None
        self.emb_off: int | None = None  # absolute file offset of the float32 block
        self.crc_ok = False


class CommittedState:
    """Immutable view of one committed database state."""

    __slots__ = (
        "seq",
        "next_vector_id",
        "partitions",
        "centroid_extents",
        "attr_extents",
        "stats_ref",
        "meta",
        "asset_vids",
        "vid_partition",
        "attrs",
        "_centroid_cache",
        "_stats_cache",
        "_aux",
    )

    def __init__(self) -> None:
        self.seq = 0
        self.next_vector_id = 1
        self.partitions: dict[int, list[ExtentRef]] = {}
        self.centroid_extents: list[tuple[ExtentRef, bool]] = []  # (ref, is_full_table)
        self.attr_extents: list[ExtentRef] = []
        self.stats_ref: ExtentRef | None = None
        self.meta: dict = {}
        self.asset_vids: dict[str, tuple[int, ...]] = {}
        self.vid_partition: dict[int, int] = {}
        self.attrs: dict[str, dict] = {}
        self._centroid_cache = None
        self._stats_cache = None
        self._aux: dict = {}  # lazy per-state derivatives (attr indexes etc.)

    def total_rows(self) -> int:
        return len(self.vid_partition)

    def partition_count(self, pid: int) -> int:
        return sum(r.count for r in self.partitions.get(pid, ()))


def _pack_vext(rows: list[tuple[int, str, np.ndarray]], pid: int, dim: int) -> bytes:
    # rows must be pre-sorted by vector_id; scans rely on that ordering.
    count = len(rows)
    ids = np.array([r[0] for r in rows], dtype="<u8")
    blobs = [r[1].encode("utf-8") for r in rows]
    offs = np.zeros(count + 1, dtype="<u4")
    offs[1:] = np.cumsum([len(b) for b in blobs])
    blob = b"".join(blobs)
    ids_off = _VEXT_PRO.size
    assets_off = ids_off + ids.nbytes
    emb_start = assets_off + offs.nbytes + len(blob)
    emb_off = (emb_start + 7) & ~7
    pad = b"\x00" * (emb_off - emb_start)
    emb = np.vstack([r[2] for r in rows]).astype("<f4", copy=False)
    pro = _VEXT_PRO.pack(count, pid, dim, 0, ids_off, assets_off, emb_off, 0)
    return b"".join([pro, ids.tobytes(), offs.tobytes(), blob, pad, emb.tobytes()])


def _parse_vext_tables(payload: bytes) -> tuple[np.ndarray, list[str], int, int]:
    count, pid, dim, _flags, ids_off, assets_off, emb_off, _ = _VEXT_PRO.unpack_from(payload, 0)
    ids = np.frombuffer(payload, dtype="<u8", count=count, offset=ids_off)
    offs = np.frombuffer(payload, dtype="<u4", count=count + 1, offset=assets_off)
    blob_start = assets_off + (count + 1) * 4
    assets = [
        payload[blob_start + offs[i] : blob_start + offs[i + 1]].decode("utf-8")
        for i in range(count)
    ]
    return ids, assets, emb_off, pid


def _pack_cext(records: list[CentroidRecord], dim: int) -> bytes:
    pids = np.array([r.partition_id for r in records], dtype="<u4")
    mat = np.vstack([r.centroid for r in records]).astype("<f4", copy=False)
    return _CEXT_PRO.pack(len(records), dim) + pids.tobytes() + mat.tobytes()


def _parse_cext(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    count, dim = _CEXT_PRO.unpack_from(payload, 0)
    pids = np.frombuffer(payload, dtype="<u4", count=count, offset=_CEXT_PRO.size)
    mat = np.frombuffer(
        payload, dtype="<f4", count=count * dim, offset=_CEXT_PRO.size + pids.nbytes
    ).reshape(count, dim)
    return pids, mat


class Snapshot:
    """Read handle over exactly one committed state."""

    def __init__(self, store: "VectorStore", state: CommittedState):
        self._store = store
        self._state = state

    @property
    def seq(self) -> int:
        return self._state.seq

    @property
    def store(self) -> "VectorStore":
        return self._store

    @property
    def dimension(self) -> int:
        return self._store.dimension

    @property
    def metric(self) -> Metric:
        return self._store.metric

    @property
    def meta(self) -> dict:
        return self._state.meta

    @property
    def aux(self) -> dict:
        """Scratch space for caches keyed to this committed state."""
        return self._state._aux

    def total_rows(self) -> int:
        return self._state.total_rows()

    def partition_ids(self) -> list[int]:
        return sorted(p for p, refs in self._state.partitions.items() if refs)

    def partition_count(self, pid: int) -> int:
        return self._state.partition_count(pid)

    def partition_sizes(self) -> dict[int, int]:
        # Memoized on the committed state (immutable); the optimizer asks for
        # sizes on every plan estimate.
        sizes = self._state._aux.get("partition_sizes")
        if sizes is None:
            sizes = {p: self._state.partition_count(p) for p in self.partition_ids()}
            self._state._aux["partition_sizes"] = sizes
        return dict(sizes)

    def attrs(self) -> Mapping[str, dict]:
        return self._state.attrs

    def asset_vector_ids(self, asset_id: str) -> tuple[int, ...]:
        return self._state.asset_vids.get(asset_id, ())

    def iter_blocks(self, pid: int) -> Iterator[tuple[np.ndarray, list[str], np.ndarray, np.ndarray]]:
        """Yield (vector_ids, asset_ids, embeddings_f64, squared_norms) per extent.

        This is the distance-kernel fast path; blocks come from the store's
        extent cache. Counts one region touch per extent and one partition
        scan per call.
        """
        self._store.counters.add("partition_scans")
        for ref in self._state.partitions.get(pid, ()):
            self._store.counters.add("regions_touched")
            emb64, norms = self._store._block_f64(ref)
            yield ref.ids, ref.assets, emb64, norms

    def iter_vector_ids(self) -> Iterator[int]:
        """All vector ids in stable (partition, extent, id) order; no row reads."""
        for pid in sorted(p for p, refs in self._state.partitions.items() if refs):
            for ref in self._state.partitions[pid]:
                for v in ref.ids:
                    yield int(v)

    def iter_records(self, pid: int) -> Iterator[VectorRecord]:
        """Stream VectorRecords of one partition in stable (extent, id) order."""
        self._store.counters.add("partition_scans")
        for ref in self._state.partitions.get(pid, ()):
            self._store.counters.add("regions_touched")
            emb = self._store._block_f32(ref)
            for i in range(ref.count):
                yield VectorRecord(int(ref.ids[i]), ref.assets[i], pid, emb[i])

    def centroids(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Folded centroid table as (partition_ids ascending, float32 matrix)."""
        cache = self._state._centroid_cache
        if cache is None:
            folded: dict[int, np.ndarray] = {}
            for ref, is_full in self._state.centroid_extents:
                if is_full:
                    folded.clear()
                pids, mat = _parse_cext(self._store._read_payload(ref))
                for i, p in enumerate(pids):
                    folded[int(p)] = mat[i]
            if not folded:
                cache = ()
            else:
                order = sorted(folded)
                pids_arr = np.array(order, dtype=np.uint32)
                mat = np.vstack([folded[p] for p in order])
                cache = (pids_arr, mat)
            self._state._centroid_cache = cache
        return None if cache == () else cache

    def centroid_f64(self) -> tuple[np.ndarray, np.ndarray, np.ndarray] | None:
        """(pids, centroids float64, squared norms) for the search path."""
        cached = self._state._aux.get("centroid_f64")
        if cached is None:
            table = self.centroids()
            if table is None:
                return None
            pids, mat = table
            m64 = mat.astype(np.float64)
            norms = np.einsum("ij,ij->i", m64, m64)
            cached = (pids, m64, norms)
            self._state._aux["centroid_f64"] = cached
        return cached

    def stats_blob(self) -> bytes | None:
        if self._state.stats_ref is None:
            return None
        if self._state._stats_cache is None:
            self._state._stats_cache = self._store._read_payload(self._state.stats_ref)
        return self._state._stats_cache

    def fetch_embeddings(self, vector_ids, dtype=np.float32) -> np.ndarray:
        """Per-row reads of individual embeddings, bypassing the extent cache.

        Used by clustering, whose memory bound forbids materializing whole
        extents for a handful of sampled rows; rows are cast into the target
        dtype one at a time.
        """
        return self._store._fetch_rows(self._state, vector_ids, dtype)

    def iter_selected_blocks(
        self, vector_ids
    ) -> Iterator[tuple[np.ndarray, list[str], np.ndarray, np.ndarray]]:
        """Like iter_blocks, but restricted to an arbitrary vector-id set.

        Served from a consolidated per-state copy of all rows in ascending id
        order, built once on first use: a selective gather then costs one
        searchsorted plus fancy indexing instead of a cache round-trip per
        touched extent. The copy lives as long as the committed state, the
        same memory-for-speed stance the attribute indexes take on the
        hybrid path.
        """
        try:
            want = np.unique(np.asarray(list(vector_ids), dtype=np.uint64))
        except OverflowError:
            raise ValidationError("vector_ids must be nonnegative") from None
        if want.size == 0:
            return
        cache = self._state._aux.get("row_gather")
        if cache is None:
            ids_parts, assets_flat, emb_parts, norm_parts = [], [], [], []
            for pid in self.partition_ids():
                for ref in self._state.partitions.get(pid, ()):
                    emb64, norms = self._store._block_f64(ref)
                    ids_parts.append(np.asarray(ref.ids, dtype=np.uint64))
                    assets_flat.extend(ref.assets)
                    emb_parts.append(emb64)
                    norm_parts.append(norms)
            if ids_parts:
                all_ids = np.concatenate(ids_parts)
                order = np.argsort(all_ids)
                cache = (
                    all_ids[order],
                    np.array(assets_flat, dtype=object)[order],
                    np.vstack(emb_parts)[order],
                    np.concatenate(norm_parts)[order],
                )
            else:
                cache = (
                    np.empty(0, dtype=np.uint64),
                    np.empty(0, dtype=object),
                    np.empty((0, self.dimension)),
                    np.empty(0),
                )
            self._state._aux["row_gather"] = cache
        all_ids, assets, mat, norms = cache
        self._store.counters.add("row_gathers")
        pos = np.searchsorted(all_ids, want)
        bad = pos >= len(all_ids)
        if len(all_ids):
            bad |= all_ids[np.minimum(pos, len(all_ids) - 1)] != want
        if bad.any():
            raise ValidationError(f"unknown vector_id {int(want[bad][0])}")
        yield all_ids[pos], list(assets[pos]), mat[pos], norms[pos]

    def get_record(self, vector_id: int) -> VectorRecord | None:
        pid = self._state.vid_partition.get(vector_id)
        if pid is None:
            return None
        ref, idx = self._store._locate(self._state, vector_id)
        emb = self._store._read_row(ref, idx)
        return VectorRecord(vector_id, ref.assets[idx], pid, emb)


class WriteTxn:
    """Accumulates mutations; commit() applies them atomically."""

    def __init__(self, store: "VectorStore"):
        self._store = store
        base = store._state
        self._base = base
        self._done = False
        self._next_vid = base.next_vector_id
        self._removed: set[int] = set()
        self._pending: dict[int, tuple[str, int, np.ndarray]] = {}  # vid -> (asset, pid, row)
        self._pending_assets: dict[str, list[int]] = {}  # asset -> its pending vids
        self._moved: dict[int, int] = {}
        self._attr_put: dict[str, dict] = {}
        self._attr_del: set[str] = set()
        self._centroid_full: list[CentroidRecord] | None = None
        self._centroid_overlay: dict[int, CentroidRecord] = {}
        self._meta_updates: dict = {}
        self._stats_blob: bytes | None = None

    def _check_open(self) -> None:
        if self._done:
            raise StorageError("transaction already committed or rolled back")

    def _live_vids(self, asset_id: str) -> list[int]:
        vids = [v for v in self._base.asset_vids.get(asset_id, ()) if v not in self._removed]
        vids.extend(self._pending_assets.get(asset_id, ()))
        return vids

    def upsert_vectors(self, asset_id: str, embeddings, attrs: dict | None = None) -> int:
        """Replace all vectors of asset_id with the given rows, staged in DELTA.

        Returns the number of rows inserted. Raises ValidationError on a
        dimension mismatch or a schema violation in attrs.
        """
        self._check_open()
        store = self._store
        emb = np.asarray(embeddings, dtype=np.float32)
        if emb.ndim == 1:
            emb = emb.reshape(1, -1)
        if emb.ndim != 2 or emb.shape[1] != store.dimension:
            raise ValidationError(
                f"embedding dimension {emb.shape[-1] if emb.ndim else '?'} != store dimension {store.dimension}"
            )
        if store.metric == Metric.COSINE:
            emb = normalize_rows(emb).astype(np.float32)
        if attrs is not None:
            _validate_attrs(store.config.schema, attrs)
        for vid in self._live_vids(asset_id):
            if vid in self._pending:
                del self._pending[vid]
            else:
                self._removed.add(vid)
            self._moved.pop(vid, None)
        new_vids = []
        for row in emb:
            vid = self._next_vid
            self._next_vid += 1
            self._pending[vid] = (asset_id, DELTA_PARTITION, row)
            new_vids.append(vid)
        self._pending_assets[asset_id] = new_vids
        if attrs is not None:
            self._attr_put[asset_id] = dict(attrs)
            self._attr_del.discard(asset_id)
        return int(emb.shape[0])

    def delete_asset(self, asset_id: str) -> int:
        """Physically remove all vectors and the attribute row of asset_id."""
        self._check_open()
        vids = self._live_vids(asset_id)
        for vid in vids:
            if vid in self._pending:
                del self._pending[vid]
            else:
                self._removed.add(vid)
            self._moved.pop(vid, None)
        self._pending_assets.pop(asset_id, None)
        self._attr_put.pop(asset_id, None)
        if asset_id in self._base.attrs or asset_id in self._base.asset_vids:
            self._attr_del.add(asset_id)
        return len(vids)

    def put_centroids(self, records: list[CentroidRecord]) -> None:
        """Atomically replace the whole centroid table."""
        self._check_open()
        self._validate_centroids(records)
        self._centroid_full = list(records)
        self._centroid_overlay.clear()

    def update_centroids(self, records: list[CentroidRecord]) -> None:
        """Overlay-update a subset of centroids (flush path: touched rows only)."""
        self._check_open()
        self._validate_centroids(records)
        known = self._centroid_pids()
        for r in records:
            if r.partition_id not in known:
                raise ValidationError(f"update_centroids: unknown partition {r.partition_id}")
            self._centroid_overlay[r.partition_id] = r

    def _validate_centroids(self, records: list[CentroidRecord]) -> None:
        seen = set()
        for r in records:
            if r.partition_id == DELTA_PARTITION:
                raise ValidationError("centroid partition_id cannot be the delta sentinel")
            if r.partition_id in seen:
                raise ValidationError(f"duplicate centroid partition {r.partition_id}")
            seen.add(r.partition_id)
            c = np.asarray(r.centroid)
            if c.shape != (self._store.dimension,):
                raise ValidationError("centroid dimension mismatch")

    def _centroid_pids(self) -> set[int]:
        if self._centroid_full is not None:
            pids = {r.partition_id for r in self._centroid_full}
        else:
            table = Snapshot(self._store, self._base).centroids()
            pids = set() if table is None else {int(p) for p in table[0]}
        pids.update(self._centroid_overlay)
        return pids

    def update_assignments(self, mapping: dict[int, int]) -> None:
        """Move existing rows to new partitions (physical re-clustering at commit)."""
        self._check_open()
        known = self._centroid_pids()
        for vid, pid in mapping.items():
            vid = int(vid)
            pid = int(pid)
            if pid != DELTA_PARTITION and pid not in known:
                raise ValidationError(f"assignment to unknown partition {pid}")
            if vid in self._pending:
                asset, _old, row = self._pending[vid]
                self._pending[vid] = (asset, pid, row)
            elif vid in self._base.vid_partition and vid not in self._removed:
                self._moved[vid] = pid
            else:
                raise ValidationError(f"unknown vector_id {vid}")

    def put_stats_blob(self, blob: bytes) -> None:
        self._check_open()
        self._stats_blob = bytes(blob)

    def update_meta(self, updates: dict) -> None:
        self._check_open()
        self._meta_updates.update(updates)

    def commit(self) -> None:
        self._check_open()
        try:
            self._store._commit(self)
        finally:
            if not self._store._dead:
                self._done = True
                self._store._write_lock.release()

    def rollback(self) -> None:
        # Tolerant by design: rolling back after a failed commit (which
        # already released the lock) or on a store killed mid-commit is a
        # no-op, so callers can use try/except without state checks.
        if self._done or self._store._dead:
            return
        self._done = True
        self._store._write_lock.release()


def _validate_attrs(schema: dict[str, str], values: dict) -> None:
    for col, val in values.items():
        typ = schema.get(col)
        if typ is None:
            raise ValidationError(f"attribute column {col!r} not declared in schema")
        if typ == "int" and not (isinstance(val, int) and not isinstance(val, bool)):
            raise ValidationError(f"column {col!r} expects int, got {type(val).__name__}")
        if typ == "float" and (isinstance(val, bool) or not isinstance(val, (int, float))):
            raise ValidationError(f"column {col!r} expects float, got {type(val).__name__}")
        if typ in ("str", "tokens") and not isinstance(val, str):
            raise ValidationError(f"column {col!r} expects str, got {type(val).__name__}")


class VectorStore:
    """The database file plus its journal sidecar.

    Use :meth:`open` rather than the constructor. One serialized writer; any
    number of in-process snapshot readers over shared pread file descriptors.
    """

    def __init__(self, path: str, config: DbConfig):
        self.path = path
        self.journal_path = path + ".journal"
        self.config = config
        self.counters = Counters()
        self.kill_points: set[str] = set()
        self._write_lock = threading.Lock()
        self._state_lock = threading.Lock()
        self._cache_lock = threading.Lock()
        self._cache: OrderedDict[int, tuple[np.ndarray, np.ndarray]] = OrderedDict()
        self._cache_bytes = 0
        self._dead = False
        self._fd = -1
        self._jfd = -1
        self._pool: ThreadPoolExecutor | None = None
        self._state = CommittedState()
        self.dimension = 0
        self.metric = Metric.SQUARED_L2

    # ------------------------------------------------------------------ open

    @classmethod
    def open(cls, path: str, config: DbConfig | None = None) -> "VectorStore":
        """Open or create a store.

        Creating requires config.dimension; reopening checks dimension and
        metric against the file header and replays the journal if a crash
        left a partial commit.
        """
        config = config or DbConfig()
        store = cls(path, config)
        if os.path.exists(path) and os.path.getsize(path) > 0:
            store._open_existing()
        else:
            store._create()
        return store

    def _create(self) -> None:
        if self.config.dimension is None or self.config.dimension < 1:
            raise ValidationError("creating a store requires dimension >= 1")
        self.dimension = int(self.config.dimension)
        self.metric = self.config.metric
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        self._jfd = os.open(self.journal_path, os.O_RDWR | os.O_CREAT, 0o644)
        os.ftruncate(self._fd, 0)
        os.ftruncate(self._jfd, 0)
        header = bytearray(HEADER_SIZE)
        header[:_HDR_FIX.size] = _HDR_FIX.pack(MAGIC, FORMAT_VERSION, self.dimension, int(self.metric))
        header[_SLOT_OFF : _SLOT_OFF + _SLOT.size] = self._pack_slot(0, 0, 0, HEADER_SIZE, 0)
        os.pwrite(self._fd, bytes(header), 0)
        self._fsync(self._fd)
        self._state = CommittedState()
        self._state.meta = {"schema": dict(self.config.schema)}

    @staticmethod
    def _pack_slot(seq: int, man_off: int, man_len: int, eof: int, man_crc: int) -> bytes:
        body = struct.pack("<QQQQI", seq, man_off, man_len, eof, man_crc)
        return body + struct.pack("<I", zlib.crc32(body))

    def _open_existing(self) -> None:
        self._fd = os.open(self.path, os.O_RDWR)
        self._jfd = os.open(self.journal_path, os.O_RDWR | os.O_CREAT, 0o644)
        header = os.pread(self._fd, HEADER_SIZE, 0)
        if len(header) < HEADER_SIZE or header[:4] != MAGIC:
            raise CorruptFileError(f"{self.path}: not a vector store (bad magic)")
        magic, version, dim, metric_tag = _HDR_FIX.unpack_from(header, 0)
        if version != FORMAT_VERSION:
            raise CorruptFileError(f"{self.path}: unsupported format version {version}")
        if self.config.dimension is not None and self.config.dimension != dim:
            raise ValidationError(
                f"dimension mismatch: store has D={dim}, config requests D={self.config.dimension}"
            )
        self.dimension = dim
        self.metric = Metric(metric_tag)
        self.config.dimension = dim
        self.config.metric = self.metric
        slot = self._recover(header)
        seq, man_off, man_len, eof, man_crc = slot
        # Discard anything beyond the committed EOF (partial appends) and
        # whatever is left in the journal; both are pre-commit garbage now.
        if os.path.getsize(self.path) > eof:
            os.ftruncate(self._fd, eof)
            self._fsync(self._fd)
        os.ftruncate(self._jfd, 0)
        self._fsync(self._jfd)
        self._load_state(seq, man_off, man_len, man_crc)

    def _recover(self, header: bytes) -> tuple[int, int, int, int, int]:
        slot_raw = header[_SLOT_OFF : _SLOT_OFF + _SLOT.size]
        body, (crc,) = slot_raw[:36], struct.unpack("<I", slot_raw[36:40])
        slot_valid = zlib.crc32(body) == crc
        slot = struct.unpack("<QQQQI", body) if slot_valid else None

        jrec = None
        try:
            raw = os.pread(self._jfd, _JREC.size, 0)
        except OSError:
            raw = b""
        if len(raw) == _JREC.size:
            magic, seq, man_off, man_len, eof, man_crc, rec_crc = _JREC.unpack(raw)
            if magic == JOURNAL_MAGIC and zlib.crc32(raw[:-4]) == rec_crc:
                jrec = (seq, man_off, man_len, eof, man_crc)

        if jrec is not None and (slot is None or jrec[0] > slot[0]):
            # Journal is newer: the commit reached its durability point.
            # Verify the manifest bytes it names, then roll the header forward.
            man = os.pread(self._fd, jrec[2], jrec[1])
            if len(man) == jrec[2] and zlib.crc32(man) == jrec[4]:
                os.pwrite(self._fd, self._pack_slot(*jrec), _SLOT_OFF)
                self._fsync(self._fd)
                return jrec
            if slot is not None:
                return slot
            raise CorruptFileError(f"{self.path}: journal names an unreadable manifest")
        if slot is None:
            raise CorruptFileError(f"{self.path}: torn header slot and no usable journal")
        return slot

    def _load_state(self, seq: int, man_off: int, man_len: int, man_crc: int) -> None:
        state = CommittedState()
        state.seq = seq
        if man_len == 0:
            state.meta = {"schema": dict(self.config.schema)}
            self._state = state
            return
        raw = os.pread(self._fd, man_len, man_off)
        if len(raw) != man_len or zlib.crc32(raw) != man_crc:
            raise CorruptFileError(f"{self.path}: manifest checksum mismatch")
        man = json.loads(raw.decode("utf-8"))
        state.next_vector_id = man["next_vector_id"]
        state.meta = man.get("meta", {})
        schema = state.meta.get("schema", {})
        if self.config.schema and self.config.schema != schema:
            state.meta["schema"] = dict(self.config.schema)
        else:
            self.config.schema = dict(schema)
        for pid_s, lst in man["partitions"].items():
            pid = int(pid_s)
            refs = []
            for start, length, count in lst:
                ref = ExtentRef(start, length, count, pid)
                self._load_vext_tables(ref)
                refs.append(ref)
            state.partitions[pid] = refs
        for start, length, count, full in man.get("centroids", []):
            state.centroid_extents.append((ExtentRef(start, length, count), bool(full)))
        for start, length in man.get("attrs", []):
            state.attr_extents.append(ExtentRef(start, length, 0))
        if man.get("stats"):
            start, length = man["stats"]
            state.stats_ref = ExtentRef(start, length, 0)
        for pid, refs in state.partitions.items():
            for ref in refs:
                for i in range(ref.count):
                    vid = int(ref.ids[i])
                    state.vid_partition[vid] = pid
                    asset = ref.assets[i]
                    state.asset_vids[asset] = state.asset_vids.get(asset, ()) + (vid,)
        for ref in state.attr_extents:
            delta = json.loads(self._read_payload(ref).decode("utf-8"))
            for asset in delta.get("del", []):
                state.attrs.pop(asset, None)
            state.attrs.update(delta.get("put", {}))
        self._state = state

    def _load_vext_tables(self, ref: ExtentRef) -> None:
        payload = self._read_payload(ref)
        ids, assets, emb_off, _pid = _parse_vext_tables(payload)
        ref.ids = ids
        ref.assets = assets
        ref.emb_off = ref.start + _EXT_HDR.size + emb_off
        ref.crc_ok = True

    # ----------------------------------------------------------------- reads

    def _check_alive(self) -> None:
        if self._dead:
            raise StorageError("store handle died at an injected crash; reopen the file")
        if self._fd < 0:
            raise StorageError("store is closed")

    def _read_payload(self, ref: ExtentRef) -> bytes:
        raw = os.pread(self._fd, ref.length, ref.start)
        if len(raw) != ref.length:
            raise CorruptFileError(f"{self.path}: short extent read at {ref.start}")
        magic, kind, plen, pcrc = _EXT_HDR.unpack_from(raw, 0)
        if magic != EXTENT_MAGIC or plen != ref.length - _EXT_HDR.size:
            raise CorruptFileError(f"{self.path}: bad extent header at {ref.start}")
        payload = raw[_EXT_HDR.size :]
        if not ref.crc_ok:
            if zlib.crc32(payload) != pcrc:
                raise CorruptFileError(f"{self.path}: extent checksum mismatch at {ref.start}")
            ref.crc_ok = True
        return payload

    def _block_f32(self, ref: ExtentRef) -> np.ndarray:
        raw = os.pread(self._fd, ref.count * self.dimension * 4, ref.emb_off)
        return np.frombuffer(raw, dtype="<f4").reshape(ref.count, self.dimension)

    def _block_f64(self, ref: ExtentRef) -> tuple[np.ndarray, np.ndarray]:
        with self._cache_lock:
            hit = self._cache.get(ref.start)
            if hit is not None:
                self._cache.move_to_end(ref.start)
                return hit
        m64 = self._block_f32(ref).astype(np.float64)
        norms = np.einsum("ij,ij->i", m64, m64)
        entry = (m64, norms)
        size = m64.nbytes + norms.nbytes
        with self._cache_lock:
            if ref.start not in self._cache:
                self._cache[ref.start] = entry
                self._cache_bytes += size
                while self._cache_bytes > self.config.cache_bytes and len(self._cache) > 1:
                    _, (old_m, old_n) = self._cache.popitem(last=False)
                    self._cache_bytes -= old_m.nbytes + old_n.nbytes
        return entry

    def _locate(self, state: CommittedState, vid: int) -> tuple[ExtentRef, int]:
        pid = state.vid_partition.get(vid)
        if pid is None:
            raise ValidationError(f"unknown vector_id {vid}")
        for ref in state.partitions[pid]:
            idx = int(np.searchsorted(ref.ids, vid))
            if idx < ref.count and ref.ids[idx] == vid:
                return ref, idx
        raise CorruptFileError(f"vector_id {vid} missing from its partition extents")

    def _read_row(self, ref: ExtentRef, idx: int) -> np.ndarray:
        raw = os.pread(self._fd, self.dimension * 4, ref.emb_off + idx * self.dimension * 4)
        return np.frombuffer(raw, dtype="<f4").copy()

    def _gather_rows(self, state: CommittedState, vids: set[int]) -> dict[int, tuple[str, np.ndarray]]:
        """vid -> (asset_id, float32 row) with one vectorized probe per extent.

        Rows are still read one at a time (no whole-extent materialization);
        only the id lookup is batched, so gathering m rows costs O(extents)
        probes instead of O(m * extents).
        """
        by_pid: dict[int, list[int]] = {}
        for vid in vids:
            pid = state.vid_partition.get(vid)
            if pid is None:
                raise ValidationError(f"unknown vector_id {vid}")
            by_pid.setdefault(pid, []).append(vid)
        out: dict[int, tuple[str, np.ndarray]] = {}
        for pid, want in by_pid.items():
            remaining = np.array(sorted(want), dtype=np.uint64)
            for ref in state.partitions.get(pid, ()):
                if not len(remaining):
                    break
                clipped = np.minimum(np.searchsorted(ref.ids, remaining), ref.count - 1)
                hit = ref.ids[clipped] == remaining
                if not hit.any():
                    continue
                for vid, idx in zip(remaining[hit].tolist(), clipped[hit].tolist()):
                    out[vid] = (ref.assets[idx], self._read_row(ref, idx))
                remaining = remaining[~hit]
            if len(remaining):
                raise CorruptFileError(
                    f"vector_id {int(remaining[0])} missing from its partition extents"
                )
        return out

    def _fetch_rows(self, state: CommittedState, vids, dtype=np.float32) -> np.ndarray:
        gathered = self._gather_rows(state, {int(v) for v in vids})
        out = np.empty((len(vids), self.dimension), dtype=dtype)
        for i, vid in enumerate(vids):
            out[i] = gathered[int(vid)][1]
        return out

    def drop_caches(self) -> None:
        with self._cache_lock:
            self._cache.clear()
            self._cache_bytes = 0

    def executor(self) -> "ThreadPoolExecutor":
        """Shared scan-worker pool, created on first use."""
        with self._state_lock:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(
                    max_workers=max(2, self.config.workers), thread_name_prefix="mvec-scan"
                )
            return self._pool

    # ------------------------------------------------------------------ txns

    def begin_snapshot(self) -> Snapshot:
        self._check_alive()
        with self._state_lock:
            return Snapshot(self, self._state)

    def begin_write(self, timeout: float | None = None) -> WriteTxn:
        """Acquire the single writer slot, blocking up to the busy timeout."""
        self._check_alive()
        limit = self.config.busy_timeout if timeout is None else timeout
        if not self._write_lock.acquire(timeout=limit):
            raise BusyError(f"writer busy after {limit:.3f}s")
        return WriteTxn(self)

    def _maybe_kill(self, name: str) -> None:
        if name in self.kill_points:
            self._dead = True
            raise InjectedCrash(name)

    def _fsync(self, fd: int) -> None:
        if self.config.fsync:
            os.fsync(fd)

    def _commit(self, txn: WriteTxn) -> None:
        self._check_alive()
        base = txn._base
        if base is not self._state:
            raise StorageError("stale transaction (state advanced underneath it)")

        dim = self.dimension
        # Group removals/moves by current partition to find touched extents.
        gone_by_pid: dict[int, set[int]] = {}
        for vid in txn._removed:
            gone_by_pid.setdefault(base.vid_partition[vid], set()).add(vid)
        for vid in txn._moved:
            gone_by_pid.setdefault(base.vid_partition[vid], set()).add(vid)

        # Residual rows of touched extents are rewritten with their embeddings
        # buffered inline (bounded by the touched extents). Moved rows carry
        # None and are fetched per pack chunk via pread, so a full
        # re-clustering never materializes the whole dataset in memory.
        new_rows: dict[int, list[tuple[int, str, np.ndarray | None]]] = {}
        dropped: dict[int, list[ExtentRef]] = {}
        removed_assets: set[str] = set()
        for pid, gone in gone_by_pid.items():
            gone_arr = np.array(sorted(gone), dtype=np.uint64)
            for ref in base.partitions.get(pid, ()):
                clipped = np.minimum(np.searchsorted(ref.ids, gone_arr), ref.count - 1)
                if not (ref.ids[clipped] == gone_arr).any():
                    continue
                dropped.setdefault(pid, []).append(ref)
                residual_idx = []
                for i in range(ref.count):
                    vid = int(ref.ids[i])
                    if vid in txn._removed:
                        removed_assets.add(ref.assets[i])
                    elif vid not in txn._moved:
                        residual_idx.append(i)
                if residual_idx:
                    emb = self._block_f32(ref)
                    for i in residual_idx:
                        new_rows.setdefault(pid, []).append(
                            (int(ref.ids[i]), ref.assets[i], emb[i].copy())
                        )
        for vid, new_pid in txn._moved.items():
            new_rows.setdefault(new_pid, []).append((vid, "", None))
        for vid, (asset, pid, row) in txn._pending.items():
            new_rows.setdefault(pid, []).append((vid, asset, row))

        # Serialize extents followed by the manifest into one append buffer.
        eof0 = self._committed_eof()
        buf = bytearray()
        appended: list[tuple[ExtentRef, int]] = []
        vex_rows_written = 0

        def append_extent(kind: int, payload: bytes, count: int) -> ExtentRef:
            start = eof0 + len(buf)
            crc = zlib.crc32(payload)
            buf.extend(_EXT_HDR.pack(EXTENT_MAGIC, kind, len(payload), crc))
            buf.extend(payload)
            ref = ExtentRef(start, _EXT_HDR.size + len(payload), count)
            ref.crc_ok = True
            appended.append((ref, kind))
            return ref

        new_partitions: dict[int, list[ExtentRef]] = dict(base.partitions)
        for pid in set(list(dropped) + list(new_rows)):
            keep = [r for r in new_partitions.get(pid, ()) if r not in dropped.get(pid, [])]
            rows = sorted(new_rows.get(pid, ()), key=lambda r: r[0])
            for i in range(0, len(rows), ROWS_PER_EXTENT):
                chunk = rows[i : i + ROWS_PER_EXTENT]
                missing = {vid for vid, _a, row in chunk if row is None}
                if missing:
                    gathered = self._gather_rows(base, missing)
                    for j, (vid, asset, row) in enumerate(chunk):
                        if row is None:
                            asset, row = gathered[vid]
                            chunk[j] = (vid, asset, row)
                payload = _pack_vext(chunk, pid, dim)
                ref = append_extent(KIND_VECTORS, payload, len(chunk))
                ref.partition_id = pid
                ref.ids = np.array([r[0] for r in chunk], dtype=np.uint64)
                ref.assets = [r[1] for r in chunk]
                ref.emb_off = ref.start + _EXT_HDR.size + _VEXT_PRO.unpack_from(payload, 0)[6]
                keep.append(ref)
                vex_rows_written += len(chunk)
            if keep:
                new_partitions[pid] = keep
            else:
                new_partitions.pop(pid, None)

        centroid_rows_written = 0
        new_centroid_extents = list(base.centroid_extents)
        if txn._centroid_full is not None:
            recs = sorted(txn._centroid_full, key=lambda r: r.partition_id)
            if recs:
                ref = append_extent(KIND_CENTROIDS, _pack_cext(recs, dim), len(recs))
                new_centroid_extents = [(ref, True)]
            else:
                new_centroid_extents = []
            centroid_rows_written += len(recs)
        if txn._centroid_overlay:
            recs = sorted(txn._centroid_overlay.values(), key=lambda r: r.partition_id)
            ref = append_extent(KIND_CENTROIDS, _pack_cext(recs, dim), len(recs))
            new_centroid_extents.append((ref, False))
            centroid_rows_written += len(recs)

        new_attr_extents = list(base.attr_extents)
        attr_rows_written = 0
        if txn._attr_put or txn._attr_del:
            delta = {"put": txn._attr_put, "del": sorted(txn._attr_del)}
            payload = json.dumps(delta, separators=(",", ":")).encode("utf-8")
            new_attr_extents.append(append_extent(KIND_ATTRS, payload, 0))
            attr_rows_written = len(txn._attr_put) + len(txn._attr_del)

        new_stats_ref = base.stats_ref
        if txn._stats_blob is not None:
            new_stats_ref = append_extent(KIND_STATS, txn._stats_blob, 0)

        seq = base.seq + 1
        manifest = {
            "seq": seq,
            "next_vector_id": txn._next_vid,
            "partitions": {
                str(pid): [[r.start, r.length, r.count] for r in refs]
                for pid, refs in new_partitions.items()
            },
            "centroids": [[r.start, r.length, r.count, int(full)] for r, full in new_centroid_extents],
            "attrs": [[r.start, r.length] for r in new_attr_extents],
            "stats": [new_stats_ref.start, new_stats_ref.length] if new_stats_ref else None,
            "meta": {**base.meta, **txn._meta_updates},
        }
        man_bytes = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
        man_off = eof0 + len(buf)
        man_crc = zlib.crc32(man_bytes)
        buf.extend(man_bytes)
        new_eof = eof0 + len(buf)

        try:
            os.pwrite(self._fd, bytes(buf), eof0)
            self._fsync(self._fd)
            self._maybe_kill("after_data_append")

            jrec_body = struct.pack("<4sQQQQI", JOURNAL_MAGIC, seq, man_off, len(man_bytes), new_eof, man_crc)
            os.ftruncate(self._jfd, 0)
            os.pwrite(self._jfd, jrec_body + struct.pack("<I", zlib.crc32(jrec_body)), 0)
            self._fsync(self._jfd)
            self._maybe_kill("after_journal_write")

            slot = self._pack_slot(seq, man_off, len(man_bytes), new_eof, man_crc)
            if "mid_header_write" in self.kill_points:
                os.pwrite(self._fd, slot[:20], _SLOT_OFF)  # torn in-place write
                self._maybe_kill("mid_header_write")
            os.pwrite(self._fd, slot, _SLOT_OFF)
            self._fsync(self._fd)
            self._maybe_kill("after_header_write")

            os.ftruncate(self._jfd, 0)
            self._fsync(self._jfd)
        except InjectedCrash:
            raise
        except OSError as e:
            # Failed commit: the header still names the old state; drop the
            # partial append so the file ends at the committed EOF again.
            try:
                os.ftruncate(self._fd, eof0)
                os.ftruncate(self._jfd, 0)
            except OSError:
                pass
            raise StorageError(f"commit failed: {e}") from e

        state = CommittedState()
        state.seq = seq
        state.next_vector_id = txn._next_vid
        state.partitions = new_partitions
        state.centroid_extents = new_centroid_extents
        state.attr_extents = new_attr_extents
        state.stats_ref = new_stats_ref
        state.meta = manifest["meta"]

        asset_vids = dict(base.asset_vids)
        vid_partition = dict(base.vid_partition)
        changed_assets: dict[str, None] = {}
        for vid in txn._removed:
            vid_partition.pop(vid, None)
        for vid, pid in txn._moved.items():
            vid_partition[vid] = pid
        for vid, (asset, pid, _row) in txn._pending.items():
            vid_partition[vid] = pid
            changed_assets[asset] = None
        for asset in removed_assets:
            changed_assets[asset] = None
        for asset in changed_assets:
            vids = [v for v in asset_vids.get(asset, ()) if v not in txn._removed]
            vids.extend(txn._pending_assets.get(asset, ()))
            if vids:
                asset_vids[asset] = tuple(sorted(vids))
            else:
                asset_vids.pop(asset, None)
        state.asset_vids = asset_vids
        state.vid_partition = vid_partition

        attrs = dict(base.attrs)
        for asset in txn._attr_del:
            attrs.pop(asset, None)
        for asset, values in txn._attr_put.items():
            attrs[asset] = values
        state.attrs = attrs

        with self._state_lock:
            self._state = state
        self.counters.add("row_writes", vex_rows_written + centroid_rows_written + attr_rows_written)
        self.counters.add("commits")

    def _committed_eof(self) -> int:
        raw = os.pread(self._fd, _SLOT.size, _SLOT_OFF)
        seq, man_off, man_len, eof, man_crc, crc = _SLOT.unpack(raw)
        return eof

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1
        if self._jfd >= 0:
            os.close(self._jfd)
            self._jfd = -1

    def __enter__(self) -> "VectorStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
