"""Append-only columnar soft-label store with snapshot isolation.

One writer (the teacher) appends immutable segments; many readers (the
student fleet) open snapshots. A snapshot is pinned to the manifest it was
opened against, so every reader sharing a manifest version sees the same
bytes no matter how far the writer has advanced since.

On-disk layout, all little-endian:

  seg-<id>.sls   "SLS1" | u32 version=1 | u64 segment_id | u64 teacher_version
                 | u16 n_tasks | (u16 name_len, name utf8, u8 kind)*
                 | u64 n_rows | u64 ids[n] | f32 values[n] per task | u32 crc32
  MANIFEST       "SLM1" | u64 manifest_version | u32 n_segments
                 | u64 segment_ids[n] | u32 crc32

The crc32 covers every preceding byte of the file. Commit order is segment
file first (atomic rename), manifest second (atomic rename), so a crash at
any byte leaves the store readable at the previous manifest version.
"""

from __future__ import annotations

import fcntl
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import StoreCorruptionError, StoreError, WriterLockError
from .ranker import BINARY, REGRESSION, TaskSpec

SEGMENT_MAGIC = b"SLS1"
MANIFEST_MAGIC = b"SLM1"
RECORD_MAGIC = b"SLR1"
FORMAT_VERSION = 1
MANIFEST_NAME = "MANIFEST"
LOCK_NAME = "WRITER.lock"

_KIND_TO_BYTE = {BINARY: 0, REGRESSION: 1}
_BYTE_TO_KIND = {v: k for k, v in _KIND_TO_BYTE.items()}

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_U8 = struct.Struct("<B")


def _crc(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def segment_filename(segment_id: int) -> str:
    return f"seg-{segment_id:016x}.sls"


class _Cursor:
    """Bounds-checked reader over a byte buffer; overruns mean corruption."""

    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise StoreCorruptionError(f"{self.path}: truncated file")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return _U8.unpack(self.take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def array(self, dtype: np.dtype, count: int) -> np.ndarray:
        raw = self.take(int(dtype.itemsize) * count)
        arr = np.frombuffer(raw, dtype=dtype).copy()
        arr.flags.writeable = False
        return arr


def _check_crc(cur: _Cursor) -> None:
    body = cur.data[: cur.off]
    stored = cur.u32()
    if cur.off != len(cur.data):
        raise StoreCorruptionError(f"{cur.path}: trailing bytes after checksum")
    if _crc(body) != stored:
        raise StoreCorruptionError(f"{cur.path}: checksum mismatch")


def _pack_task_dir(tasks: Sequence[tuple[str, str]]) -> bytes:
    parts = [_U16.pack(len(tasks))]
    for name, kind in tasks:
        raw = name.encode("utf-8")
        parts.append(_U16.pack(len(raw)))
        parts.append(raw)
        parts.append(_U8.pack(_KIND_TO_BYTE[kind]))
    return b"".join(parts)


def _read_task_dir(cur: _Cursor) -> tuple[tuple[str, str], ...]:
    n_tasks = cur.u16()
    tasks = []
    for _ in range(n_tasks):
        name = cur.take(cur.u16()).decode("utf-8")
        kind_byte = cur.u8()
        if kind_byte not in _BYTE_TO_KIND:
            raise StoreCorruptionError(f"{cur.path}: unknown task kind {kind_byte}")
        tasks.append((name, _BYTE_TO_KIND[kind_byte]))
    return tuple(tasks)


def _normalize_tasks(tasks: Sequence) -> tuple[tuple[str, str], ...]:
    out = []
    for t in tasks:
        if isinstance(t, TaskSpec):
            out.append((t.name, t.kind))
        else:
            name, kind = t
            if kind not in _KIND_TO_BYTE:
                raise StoreError(f"unknown task kind {kind!r}")
            out.append((str(name), kind))
    if len({n for n, _ in out}) != len(out):
        raise StoreError("duplicate task names in schema")
    if not out:
        raise StoreError("schema needs at least one task")
    return tuple(out)


@dataclass
class SegmentData:
    """One immutable committed segment, fully loaded."""

    segment_id: int
    teacher_version: int
    tasks: tuple[tuple[str, str], ...]
    example_ids: np.ndarray  # uint64, strictly ascending
    values: dict[str, np.ndarray]  # float32 per task

    @property
    def n_rows(self) -> int:
        return int(self.example_ids.shape[0])

    @property
    def min_id(self) -> int:
        return int(self.example_ids[0])

    @property
    def max_id(self) -> int:
        return int(self.example_ids[-1])


def encode_segment(
    segment_id: int,
    teacher_version: int,
    tasks: Sequence[tuple[str, str]],
    example_ids: np.ndarray,
    values: dict[str, np.ndarray],
) -> bytes:
    parts = [
        SEGMENT_MAGIC,
        _U32.pack(FORMAT_VERSION),
        _U64.pack(segment_id),
        _U64.pack(teacher_version),
        _pack_task_dir(tasks),
        _U64.pack(len(example_ids)),
        np.ascontiguousarray(example_ids, dtype="<u8").tobytes(),
    ]
    for name, _ in tasks:
        parts.append(np.ascontiguousarray(values[name], dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(_crc(body))


def decode_segment(data: bytes, path: Path) -> SegmentData:
    cur = _Cursor(data, path)
    if cur.take(4) != SEGMENT_MAGIC:
        raise StoreCorruptionError(f"{path}: bad segment magic")
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise StoreCorruptionError(f"{path}: unsupported format version {version}")
    segment_id = cur.u64()
    teacher_version = cur.u64()
    tasks = _read_task_dir(cur)
    n_rows = cur.u64()
    if n_rows == 0:
        raise StoreCorruptionError(f"{path}: empty segment")
    ids = cur.array(np.dtype("<u8"), n_rows)
    values = {name: cur.array(np.dtype("<f4"), n_rows) for name, _ in tasks}
    _check_crc(cur)
    if not np.all(ids[1:] > ids[:-1]):
        raise StoreCorruptionError(f"{path}: example ids not strictly ascending")
    return SegmentData(segment_id, teacher_version, tasks, ids, values)


def read_segment_file(path: Path) -> SegmentData:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise StoreCorruptionError(f"{path}: segment file missing") from None
    return decode_segment(data, Path(path))


@dataclass
class ManifestData:
    manifest_version: int
    segment_ids: tuple[int, ...]


def encode_manifest(manifest: ManifestData) -> bytes:
    parts = [
        MANIFEST_MAGIC,
        _U64.pack(manifest.manifest_version),
        _U32.pack(len(manifest.segment_ids)),
    ]
    parts.extend(_U64.pack(sid) for sid in manifest.segment_ids)
    body = b"".join(parts)
    return body + _U32.pack(_crc(body))


def decode_manifest(data: bytes, path: Path) -> ManifestData:
    cur = _Cursor(data, path)
    if cur.take(4) != MANIFEST_MAGIC:
        raise StoreCorruptionError(f"{path}: bad manifest magic")
    version = cur.u64()
    n = cur.u32()
    ids = tuple(cur.u64() for _ in range(n))
    _check_crc(cur)
    if len(set(ids)) != len(ids):
        raise StoreCorruptionError(f"{path}: duplicate segment ids in manifest")
    return ManifestData(version, ids)


def read_manifest(root: Path) -> ManifestData:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        return ManifestData(0, ())
    return decode_manifest(path.read_bytes(), path)


@dataclass
class LookupStats:
    """Counts ordered probes of stored ids during a single lookup."""

    comparisons: int = 0


class Snapshot:
    """Immutable view over the segments of one manifest version.

    Duplicate example ids across segments resolve to the value from the
    segment with the highest (teacher_version, segment_id).
    """

    def __init__(self, manifest_version: int, segments: list[SegmentData]):
        self.manifest_version = manifest_version
        self.segments = segments
        self._check_schema()
        self._index_built = False
        self._by_min: list[SegmentData] = []
        self._min_ids: list[int] = []
        self._prefix_max: list[int] = []

    def _check_schema(self) -> None:
        schemas = {seg.tasks for seg in self.segments}
        if len(schemas) > 1:
            raise StoreError("segments disagree on task schema")
        self.tasks: tuple[tuple[str, str], ...] = (
            self.segments[0].tasks if self.segments else ()
        )

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.tasks)

    def row_count(self) -> int:
        return sum(seg.n_rows for seg in self.segments)

    def _index(self):
        # Segments sorted by min id, with a running max of max ids. A probe
        # walks left from bisect(min_ids) while the running max can still
        # cover the target; disjoint ranges stop after one segment.
        if not self._index_built:
            self._by_min = sorted(self.segments, key=lambda s: (s.min_id, s.segment_id))
            self._min_ids = [s.min_id for s in self._by_min]
            running = 0
            self._prefix_max = []
            for s in self._by_min:
                running = max(running, s.max_id)
                self._prefix_max.append(running)
            self._index_built = True
        return self._by_min, self._min_ids, self._prefix_max

    def lookup(self, example_id: int, stats: LookupStats | None = None) -> dict[str, float] | None:
        """Return the per-task float32 values for one example id, or None.

        Values come back as Python floats carrying the stored 32-bit value
        exactly. Pass a LookupStats to count id probes.
        """
        by_min, min_ids, prefix_max = self._index()
        if not by_min:
            return None
        stats = stats if stats is not None else LookupStats()
        j = self._bisect_min(min_ids, example_id, stats)
        best_key = None
        best: tuple[SegmentData, int] | None = None
        while j >= 0:
            stats.comparisons += 1
            if prefix_max[j] < example_id:
                break
            seg = by_min[j]
            stats.comparisons += 1
            if seg.max_id >= example_id:
                row = self._search_segment(seg, example_id, stats)
                if row is not None:
                    key = (seg.teacher_version, seg.segment_id)
                    if best_key is None or key > best_key:
                        best_key = key
                        best = (seg, row)
            j -= 1
        if best is None:
            return None
        seg, row = best
        return {name: float(seg.values[name][row]) for name, _ in seg.tasks}

    @staticmethod
    def _bisect_min(min_ids: list[int], target: int, stats: LookupStats) -> int:
        lo, hi = 0, len(min_ids)
        while lo < hi:
            mid = (lo + hi) // 2
            stats.comparisons += 1
            if min_ids[mid] <= target:
                lo = mid + 1
            else:
                hi = mid
        return lo - 1

    @staticmethod
    def _search_segment(seg: SegmentData, target: int, stats: LookupStats) -> int | None:
        ids = seg.example_ids
        lo, hi = 0, seg.n_rows
        while lo < hi:
            mid = (lo + hi) // 2
            stats.comparisons += 1
            v = int(ids[mid])
            if v == target:
                return mid
            if v < target:
                lo = mid + 1
            else:
                hi = mid
        return None

    def lookup_batch(self, example_ids: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Vectorized lookup. Returns (present mask, per-task float32 arrays).

        Rows where present is False hold zeros and carry no meaning.
        """
        ids = np.ascontiguousarray(example_ids, dtype=np.uint64)
        n = ids.shape[0]
        present = np.zeros(n, dtype=bool)
        out = {name: np.zeros(n, dtype=np.float32) for name in self.task_names}
        if not self.segments or n == 0:
            return present, out
        lo, hi = int(ids.min()), int(ids.max())
        # ascending precedence: later writes overwrite earlier ones
        order = sorted(self.segments, key=lambda s: (s.teacher_version, s.segment_id))
        for seg in order:
            if seg.max_id < lo or seg.min_id > hi:
                continue
            pos = np.searchsorted(seg.example_ids, ids)
            pos_c = np.minimum(pos, seg.n_rows - 1)
            hit = seg.example_ids[pos_c] == ids
            if not np.any(hit):
                continue
            rows = pos_c[hit]
            for name, _ in seg.tasks:
                out[name][hit] = seg.values[name][rows]
            present |= hit
        return present, out

    def coverage(self, example_ids: np.ndarray) -> float:
        """Fraction of the given ids present in this snapshot."""
        ids = np.ascontiguousarray(example_ids, dtype=np.uint64)
        if ids.shape[0] == 0:
            return 0.0
        present, _ = self.lookup_batch(ids)
        return float(present.mean())


class LabelStore:
    """Handle on a store directory; loads segments once per process."""

    def __init__(self, root):
        self.root = Path(root)
        self._cache: dict[int, SegmentData] = {}
        self._cache_lock = threading.Lock()

    def open_snapshot(self) -> Snapshot:
        """Pin the current manifest and load its segments.

        An existing but empty store yields an empty snapshot; a missing
        directory is an error.
        """
        if not self.root.is_dir():
            raise StoreError(f"store directory missing: {self.root}")
        manifest = read_manifest(self.root)
        segments = [self._load_segment(sid) for sid in manifest.segment_ids]
        return Snapshot(manifest.manifest_version, segments)

    def _load_segment(self, segment_id: int) -> SegmentData:
        with self._cache_lock:
            seg = self._cache.get(segment_id)
        if seg is not None:
            return seg
        seg = read_segment_file(self.root / segment_filename(segment_id))
        if seg.segment_id != segment_id:
            raise StoreCorruptionError(
                f"{segment_filename(segment_id)}: header id {seg.segment_id} "
                "disagrees with filename"
            )
        with self._cache_lock:
            self._cache.setdefault(segment_id, seg)
        return seg

    def writer(self, tasks: Sequence, *, durable: bool = False) -> "SegmentWriter":
        return SegmentWriter(self, tasks, durable=durable)


class SegmentWriter:
    """Exclusive append handle; use as a context manager.

    durable=True adds fsync barriers (file before rename, directory after)
    for power-loss safety; the rename-last protocol alone already makes
    commits atomic against process crashes.
    """

    def __init__(self, store: LabelStore, tasks: Sequence, *, durable: bool = False):
        self.store = store
        self.tasks = _normalize_tasks(tasks)
        self.durable = durable
        self._lock_fd: int | None = None
        self._manifest: ManifestData | None = None

    def __enter__(self) -> "SegmentWriter":
        self.store.root.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.store.root / LOCK_NAME, os.O_CREAT | os.O_RDWR, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise WriterLockError(
                f"another writer holds the lock on {self.store.root}"
            ) from None
        self._lock_fd = fd
        self._manifest = read_manifest(self.store.root)
        return self

    def __exit__(self, *exc) -> None:
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None
        self._manifest = None

    @property
    def manifest_version(self) -> int:
        self._require_open()
        return self._manifest.manifest_version

    def _require_open(self) -> None:
        if self._lock_fd is None or self._manifest is None:
            raise StoreError("writer not open; use it as a context manager")

    def append(
        self,
        example_ids: np.ndarray,
        values: dict[str, np.ndarray],
        teacher_version: int,
    ) -> int:
        """Commit one segment: stage the file, rename it, publish the manifest.

        Rows are sorted by example id; duplicate ids within a call are an
        error. Returns the new segment id.
        """
        self._require_open()
        sid = (max(self._manifest.segment_ids) + 1) if self._manifest.segment_ids else 1
        data = self._prepare(sid, example_ids, values, teacher_version)
        self._publish_file(segment_filename(sid), data)
        self._publish_manifest(
            ManifestData(
                self._manifest.manifest_version + 1,
                self._manifest.segment_ids + (sid,),
            )
        )
        return sid

    def _prepare(
        self,
        segment_id: int,
        example_ids: np.ndarray,
        values: dict[str, np.ndarray],
        teacher_version: int,
    ) -> bytes:
        ids = np.asarray(example_ids, dtype=np.uint64)
        if ids.ndim != 1 or ids.shape[0] == 0:
            raise StoreError("append needs a non-empty 1-d id array")
        if teacher_version < 0:
            raise StoreError("teacher_version must be >= 0")
        names = {name for name, _ in self.tasks}
        if set(values.keys()) != names:
            raise StoreError(
                f"value columns {sorted(values)} disagree with schema {sorted(names)}"
            )
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        if not np.all(ids[1:] > ids[:-1]):
            raise StoreError("duplicate example ids within one append")
        cols: dict[str, np.ndarray] = {}
        for name, _ in self.tasks:
            col = np.asarray(values[name], dtype=np.float32)
            if col.shape != ids.shape:
                raise StoreError(f"column {name!r} length disagrees with ids")
            if not np.all(np.isfinite(col)):
                raise StoreError(f"column {name!r} has non-finite values")
            cols[name] = col[order]
        return encode_segment(segment_id, int(teacher_version), self.tasks, ids, cols)

    def _publish_file(self, name: str, data: bytes) -> None:
        final = self.store.root / name
        tmp = self.store.root / (name + ".tmp")
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            if self.durable:
                os.fsync(f.fileno())
        os.replace(tmp, final)
        if self.durable:
            dirfd = os.open(self.store.root, os.O_RDONLY)
            try:
                os.fsync(dirfd)
            finally:
                os.close(dirfd)

    def _publish_manifest(self, manifest: ManifestData) -> None:
        self._publish_file(MANIFEST_NAME, encode_manifest(manifest))
        self._manifest = manifest


@dataclass
class SegmentInfo:
    segment_id: int
    ok: bool
    error: str = ""
    teacher_version: int = 0
    n_rows: int = 0
    min_id: int = 0
    max_id: int = 0


@dataclass
class StoreReport:
    root: str
    manifest_version: int
    tasks: tuple[tuple[str, str], ...]
    segments: list[SegmentInfo] = field(default_factory=list)
    stray_files: list[str] = field(default_factory=list)
    error: str = ""

    @property
    def ok(self) -> bool:
        return not self.error and all(s.ok for s in self.segments)

    @property
    def total_rows(self) -> int:
        return sum(s.n_rows for s in self.segments if s.ok)


def inspect_store(root) -> StoreReport:
    """Audit a store directory without raising: manifest, per-segment
    checksums, and stray files (leftover .tmp staging is expected debris
    after a crash and is reported, not failed)."""
    root = Path(root)
    if not root.is_dir():
        return StoreReport(str(root), 0, (), error="store directory missing")
    try:
        manifest = read_manifest(root)
    except StoreCorruptionError as e:
        return StoreReport(str(root), 0, (), error=str(e))
    report = StoreReport(str(root), manifest.manifest_version, ())
    expected = {segment_filename(sid) for sid in manifest.segment_ids}
    for p in sorted(root.iterdir()):
        if p.name in (MANIFEST_NAME, LOCK_NAME) or p.name in expected:
            continue
        report.stray_files.append(p.name)
    tasks_seen: set[tuple[tuple[str, str], ...]] = set()
    for sid in manifest.segment_ids:
        try:
            seg = read_segment_file(root / segment_filename(sid))
            if seg.segment_id != sid:
                raise StoreCorruptionError("header id disagrees with manifest")
            tasks_seen.add(seg.tasks)
            report.segments.append(
                SegmentInfo(
                    sid, True, "", seg.teacher_version, seg.n_rows, seg.min_id, seg.max_id
                )
            )
        except StoreCorruptionError as e:
            report.segments.append(SegmentInfo(sid, False, str(e)))
    if len(tasks_seen) == 1:
        report.tasks = next(iter(tasks_seen))
    elif len(tasks_seen) > 1:
        report.error = "segments disagree on task schema"
    return report


def write_record_file(path, tasks: Sequence, batches: Iterable) -> int:
    """Persist streamed batches (ids, step, features, labels) for replay.

    Same conventions as segments: magic, little-endian columns, trailing
    crc32. Features and labels are stored as float32.
    """
    tasks = _normalize_tasks(tasks)
    batches = list(batches)
    if not batches:
        raise StoreError("nothing to export")
    d = batches[0].x.shape[1]
    ids = np.concatenate([b.example_ids for b in batches]).astype("<u8")
    steps = np.concatenate(
        [np.full(b.n, b.t, dtype="<u8") for b in batches]
    )
    x = np.concatenate([b.x for b in batches]).astype("<f4")
    parts = [
        RECORD_MAGIC,
        _U32.pack(FORMAT_VERSION),
        _U32.pack(d),
        _pack_task_dir(tasks),
        _U64.pack(ids.shape[0]),
        ids.tobytes(),
        steps.tobytes(),
        np.ascontiguousarray(x).tobytes(),
    ]
    for name, _ in tasks:
        col = np.concatenate([b.labels[name] for b in batches]).astype("<f4")
        parts.append(col.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + _U32.pack(_crc(body)))
    return int(ids.shape[0])


def read_record_file(path):
    """Inverse of write_record_file: (tasks, batches split on step changes)."""
    from .datagen import Batch  # record files transport stream batches

    path = Path(path)
    cur = _Cursor(path.read_bytes(), path)
    if cur.take(4) != RECORD_MAGIC:
        raise StoreCorruptionError(f"{path}: bad record magic")
    if cur.u32() != FORMAT_VERSION:
        raise StoreCorruptionError(f"{path}: unsupported format version")
    d = cur.u32()
    tasks = _read_task_dir(cur)
    n = cur.u64()
    ids = cur.array(np.dtype("<u8"), n)
    steps = cur.array(np.dtype("<u8"), n)
    x = cur.array(np.dtype("<f4"), n * d).reshape(n, d).astype(np.float64)
    labels = {
        name: cur.array(np.dtype("<f4"), n).astype(np.float64) for name, _ in tasks
    }
    _check_crc(cur)
    batches = []
    starts = [0] + [i for i in range(1, n) if steps[i] != steps[i - 1]] + [n]
    for a, b in zip(starts[:-1], starts[1:]):
        batches.append(
            Batch(
                example_ids=ids[a:b].copy(),
                t=int(steps[a]),
                x=x[a:b],
                labels={name: col[a:b] for name, col in labels.items()},
            )
        )
    specs = tuple(TaskSpec(name, kind) for name, kind in tasks)
    return specs, batches
