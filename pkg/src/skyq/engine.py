"""Streaming execution of query trees, the scan engine and the spatial hash join.

Every plan node runs in its own thread and talks to its parent through a
bounded :class:`RecordStream` carrying numpy record batches (one batch per
container for scans).  Scans fan container tasks out over ``workers``
threads, or over a process pool with ``backend="process"``.
"""

from __future__ import annotations

import atexit
import itertools
import math
import multiprocessing
import threading
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterator

import numpy as np

from . import htm
from .query import (
    QetNode,
    ScanSpec,
    evaluate,
    parse_condition,
    referenced_attrs,
    term_values,
    TAG_OUTPUT,
    DERIVED,
    QueryError,
)
from .sphere import ARCSEC, Region, angular_distance, cap, whole_sky
from .store import COLORS, IOCounter, TAG_DTYPE, read_container_file

BATCH_ROWS = 4096


class EngineError(RuntimeError):
    """Failure inside a running execution."""


class ConfigError(ValueError):
    """Invalid engine configuration."""


class Cancelled(Exception):
    """Raised inside producers once their output stream is cancelled."""


@dataclass(frozen=True)
class EngineConfig:
    """Execution settings.

    Parameters
    ----------
    workers : int
        Threads (or processes) scanning containers / joining buckets.
    stream_bound : int
        Maximum batches buffered between two nodes.
    bucket_level : int or None
        HTM level of hash-join buckets; defaults to the storage depth.
    backend : {"thread", "process"}
        Where container scans run.
    scan_delay : callable, optional
        ``scan_delay(spec) -> seconds`` slept before each container of that
        scan.  Test instrumentation for slow children.
    """

    workers: int = 1
    stream_bound: int = 16
    bucket_level: int | None = None
    backend: str = "thread"
    scan_delay: Callable[[ScanSpec], float] | None = None

    def __post_init__(self):
        if int(self.workers) < 1:
            raise ConfigError("workers must be >= 1")
        if int(self.stream_bound) < 1:
            raise ConfigError("stream_bound must be >= 1")
        if self.backend not in ("thread", "process"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.bucket_level is not None and not 0 <= self.bucket_level <= 8:
            raise ConfigError("bucket_level must be in [0, 8]")


# --------------------------------------------------------------------------
# Streams


class RecordStream:
    """Bounded multi-producer queue of record batches.

    Producers block in :meth:`put` while the queue holds ``bound`` batches.
    The stream ends once every producer has called :meth:`close`; a producer
    error (:meth:`fail`) is raised to the consumer ahead of queued data.
    """

    def __init__(self, bound: int = 16, producers: int = 1, name: str = ""):
        self.bound = int(bound)
        self.name = name
        self._q: deque = deque()
        self._cond = threading.Condition()
        self._open = int(producers)
        self._error: BaseException | None = None
        self._cancelled = False
        self._ended = False
        self.pushes = 0
        self.rejected_pushes = 0

    @property
    def cancelled(self) -> bool:
        return self._cancelled

    def put(self, batch) -> None:
        with self._cond:
            while len(self._q) >= self.bound and not self._cancelled:
                self._cond.wait()
            if self._cancelled:
                self.rejected_pushes += 1
                raise Cancelled(self.name)
            self._q.append(batch)
            self.pushes += 1
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._open -= 1
            self._cond.notify_all()

    def fail(self, exc: BaseException) -> None:
        with self._cond:
            if self._error is None:
                self._error = exc
            self._cond.notify_all()

    def cancel(self) -> None:
        with self._cond:
            self._cancelled = True
            self._q.clear()
            self._cond.notify_all()

    def get(self):
        """Next batch, or ``None`` exactly once at end of stream."""
        with self._cond:
            while True:
                if self._error is not None:
                    raise self._error
                if self._cancelled:
                    raise Cancelled(self.name)
                if self._q:
                    b = self._q.popleft()
                    self._cond.notify_all()
                    return b
                if self._open <= 0:
                    if self._ended:
                        raise EngineError(f"stream {self.name!r} read past its end")
                    self._ended = True
                    return None
                self._cond.wait()

    def __iter__(self):
        while True:
            b = self.get()
            if b is None:
                return
            yield b


# --------------------------------------------------------------------------
# Metrics


@dataclass
class NodeStats:
    kind: str
    started: float = 0.0
    input_done: float | None = None  # draining child complete (blocking nodes)
    first_emit: float | None = None
    done: float | None = None
    batches: int = 0
    rows: int = 0
    emitted_before_input_done: int = 0


class Metrics:
    """Per-execution counters reported as a key=value trailer."""

    def __init__(self):
        self.io = IOCounter()
        self._lock = threading.Lock()
        self.records_scanned = 0
        self.pairs_compared = 0
        self.started = time.perf_counter()
        self.first_record: float | None = None
        self.finished: float | None = None

    def add_scanned(self, n: int) -> None:
        with self._lock:
            self.records_scanned += n

    def add_pairs(self, n: int) -> None:
        with self._lock:
            self.pairs_compared += n

    @property
    def containers_opened(self) -> int:
        return self.io.containers_opened

    @property
    def first_record_latency(self) -> float | None:
        return None if self.first_record is None else self.first_record - self.started

    @property
    def total_latency(self) -> float | None:
        return None if self.finished is None else self.finished - self.started

    def as_dict(self) -> dict[str, Any]:
        def sec(v):
            return "nan" if v is None else f"{v:.6f}"

        return {
            "containers_opened": self.io.containers_opened,
            "bytes_tag": self.io.bytes_tag,
            "bytes_full": self.io.bytes_full,
            "records_scanned": self.records_scanned,
            "pairs_compared": self.pairs_compared,
            "first_record_latency_s": sec(self.first_record_latency),
            "total_latency_s": sec(self.total_latency),
        }

    def trailer(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items())


# --------------------------------------------------------------------------
# Container scans


def container_tasks(coverage: htm.Coverage, containers, depth: int) -> list[tuple[int, bool]]:
    """Containers to open for a coverage, with a flag for per-record testing.

    Containers under FULL trixels need no membership test.  Coverage ids
    finer than ``depth`` charge their storage-depth ancestor, which is then
    tested record by record.
    """
    present = np.array(sorted(int(t) for t in containers), dtype=np.int64)
    tasks: dict[int, bool] = {}

    def add(ids, needs_test):
        for t in ids:
            t = int(t)
            lv = htm.level(t)
            if lv <= depth:
                lo, hi = htm.descendant_range(t, depth)
                a, b = np.searchsorted(present, [lo, hi])
                for c in present[a:b].tolist():
                    tasks[c] = tasks.get(c, False) or needs_test
            else:
                c = htm.ancestor(t, depth)
                if present.size and present[min(np.searchsorted(present, c), present.size - 1)] == c:
                    tasks[c] = True

    add(coverage.full, False)
    add(coverage.partial, True)
    return sorted(tasks.items())


def _filter_records(rec, region: Region | None, residual, frames=None) -> np.ndarray:
    mask = np.ones(len(rec), dtype=bool)
    if region is not None and len(rec):
        p = np.stack([rec["cx"], rec["cy"], rec["cz"]], axis=-1)
        mask &= region.contains(p)
    if residual is not None and len(rec):
        mask &= evaluate(residual, rec, frames)
    return rec[mask]


def _scan_container(path, projection, schema, tid, region, residual):
    """Process-pool task: returns (batch, bytes read, records scanned)."""
    counter = IOCounter()
    rec = read_container_file(path, projection, schema, tid, counter)
    return _filter_records(rec, region, residual), counter.bytes_read, len(rec)


_POOLS: dict[int, ProcessPoolExecutor] = {}
_POOL_LOCK = threading.Lock()


def _process_pool(workers: int) -> ProcessPoolExecutor:
    with _POOL_LOCK:
        pool = _POOLS.get(workers)
        if pool is None:
            ctx = multiprocessing.get_context("forkserver")
            pool = ProcessPoolExecutor(max_workers=workers, mp_context=ctx)
            _POOLS[workers] = pool
        return pool


@atexit.register
def _shutdown_pools():
    for pool in _POOLS.values():
        pool.shutdown(wait=False, cancel_futures=True)
    _POOLS.clear()


# --------------------------------------------------------------------------
# Executions


class Execution:
    """A running plan.  Iterate for record batches; close to cancel.

    The first error anywhere in the tree cancels every node and is raised to
    the consumer.  ``metrics`` and ``node_stats`` stay readable afterwards.
    """

    def __init__(self, catalog, config: EngineConfig | None = None, frames=None):
        self.catalog = catalog
        self.config = config or EngineConfig()
        self.frames = frames
        self.metrics = Metrics()
        self.node_stats: dict[int, NodeStats] = {}
        self._streams: list[RecordStream] = []
        self._threads: list[threading.Thread] = []
        self._lock = threading.Lock()
        self._error: BaseException | None = None
        self._cancelled = threading.Event()
        self._root: RecordStream | None = None
        self._done = False

    # -- plumbing

    def _stream(self, producers: int = 1, name: str = "") -> RecordStream:
        s = RecordStream(self.config.stream_bound, producers, name)
        with self._lock:
            self._streams.append(s)
            if self._cancelled.is_set():
                s.cancel()
        return s

    def _spawn(self, name: str, fn: Callable, out: RecordStream, inputs=()) -> None:
        def body():
            try:
                fn()
            except Cancelled:
                pass
            except BaseException as exc:  # noqa: BLE001 - forwarded to the consumer
                self._fail(exc)
            finally:
                out.close()
                for s in inputs:
                    s.cancel()

        t = threading.Thread(target=body, name=f"skyq-{name}", daemon=True)
        with self._lock:
            self._threads.append(t)
        t.start()

    def _fail(self, exc: BaseException) -> None:
        with self._lock:
            first = self._error is None
            if first:
                self._error = exc
            streams = list(self._streams)
        if not first:
            return
        self._cancelled.set()
        for s in streams:
            if s is self._root:
                s.fail(exc)
            else:
                s.cancel()

    def _run_workers(self, worker, n: int) -> None:
        if n == 1:
            worker()
            return
        errors: list[BaseException] = []

        def wrapped():
            try:
                worker()
            except BaseException as exc:  # noqa: BLE001
                errors.append(exc)

        threads = [threading.Thread(target=wrapped, daemon=True) for _ in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for e in errors:
            if not isinstance(e, Cancelled):
                raise e
        if errors:
            raise errors[0]

    def stats_for(self, node) -> NodeStats:
        return self.node_stats[id(node)]

    @property
    def cancelled(self) -> bool:
        return self._cancelled.is_set()

    @property
    def rejected_pushes(self) -> int:
        """Pushes refused because their stream had been cancelled."""
        with self._lock:
            return sum(s.rejected_pushes for s in self._streams)

    # -- consumer side

    def __iter__(self) -> Iterator[np.ndarray]:
        if self._root is None:
            raise EngineError("execution not started")
        try:
            for batch in self._root:
                if len(batch) and self.metrics.first_record is None:
                    self.metrics.first_record = time.perf_counter()
                yield batch
        except Cancelled:
            if self._error is not None:
                raise self._error from None
            return
        finally:
            self.metrics.finished = time.perf_counter()
            self._done = True

    def rows(self) -> Iterator[np.void]:
        for batch in self:
            yield from batch

    def to_array(self) -> np.ndarray:
        batches = list(self)
        if not batches:
            return np.empty(0, dtype=self.dtype)
        return np.concatenate(batches)

    @property
    def dtype(self) -> np.dtype:
        return self._dtype

    def close(self, timeout: float = 10.0) -> None:
        """Cancel all producers and wait for their threads."""
        self._cancelled.set()
        with self._lock:
            streams = list(self._streams)
        for s in streams:
            s.cancel()
        self.join(timeout)
        if self.metrics.finished is None:
            self.metrics.finished = time.perf_counter()

    def join(self, timeout: float = 10.0) -> bool:
        deadline = time.monotonic() + timeout
        while True:
            with self._lock:
                threads = list(self._threads)
            for t in threads:
                t.join(max(0.0, deadline - time.monotonic()))
            with self._lock:
                if len(self._threads) == len(threads):
                    return not any(t.is_alive() for t in threads)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class QueryExecution(Execution):
    """Execution of a query plan tree."""

    def __init__(self, plan: QetNode, catalog, config=None, frames=None):
        super().__init__(catalog, config, frames)
        self.plan = plan
        self._dtype = output_dtype(plan, catalog)
        self._root = self._stream(name="root")
        self._start(plan, self._root)

    def _start(self, node: QetNode, out: RecordStream) -> None:
        st = NodeStats(node.kind, started=time.perf_counter())
        self.node_stats[id(node)] = st
        if node.kind == "SCAN":
            self._spawn("scan", lambda: self._run_scan(node, out, st), out)
            return
        if node.kind == "UNION":
            inbox = self._stream(len(node.children), "union-in")
            for c in node.children:
                self._start(c, inbox)
            inputs = [inbox]
        else:
            inputs = []
            for c in node.children:
                s = self._stream(name=f"{c.kind.lower()}-out")
                self._start(c, s)
                inputs.append(s)
        run = getattr(self, f"_run_{node.kind.lower()}")
        self._spawn(node.kind.lower(), lambda: run(node, inputs, out, st), out, inputs)

    @staticmethod
    def _emit(out: RecordStream, st: NodeStats, batch) -> None:
        if not len(batch):
            return
        now = time.perf_counter()
        if st.first_emit is None:
            st.first_emit = now
        if st.input_done is None and st.kind in ("SORT", "AGGREGATE", "INTERSECT", "EXCEPT"):
            st.emitted_before_input_done += len(batch)
        out.put(batch)
        st.batches += 1
        st.rows += len(batch)

    # -- node bodies

    def _run_scan(self, node: QetNode, out: RecordStream, st: NodeStats) -> None:
        spec = node.scan
        tasks = container_tasks(
            spec.coverage, dict(self.catalog.containers()), self.catalog.storage_depth
        )
        delay = self.config.scan_delay(spec) if self.config.scan_delay else 0.0
        try:
            self._scan_tasks(tasks, spec.region, spec.residual, spec.projection, delay, out, st)
        finally:
            st.done = time.perf_counter()

    def _scan_tasks(self, tasks, region, residual, projection, delay, out, st) -> None:
        cat = self.catalog
        schema = cat.schema
        it = iter(tasks)
        lock = threading.Lock()
        pool = _process_pool(self.config.workers) if self.config.backend == "process" else None
        emit_lock = threading.Lock()

        def worker():
            while True:
                with lock:
                    nxt = next(it, None)
                if nxt is None or out.cancelled or self._cancelled.is_set():
                    return
                tid, needs_test = nxt
                if delay:
                    time.sleep(delay)
                reg = region if needs_test else None
                path = cat.container_file(tid)
                if pool is None:
                    rec = read_container_file(path, projection, schema, tid, self.metrics.io)
                    batch = _filter_records(rec, reg, residual, self.frames)
                    n = len(rec)
                else:
                    batch, nbytes, n = pool.submit(
                        _scan_container, path, projection, schema, tid, reg, residual
                    ).result()
                    self.metrics.io.add(projection, nbytes)
                self.metrics.add_scanned(n)
                with emit_lock:
                    self._emit(out, st, batch)

        self._run_workers(worker, self.config.workers)

    def _run_union(self, node, inputs, out, st) -> None:
        seen: set[int] = set()
        for batch in inputs[0]:
            ids = batch["obj_id"]
            _, first = np.unique(ids, return_index=True)
            first.sort()
            cand = batch[first]
            idl = cand["obj_id"].tolist()
            fresh = np.fromiter((i not in seen for i in idl), dtype=bool, count=len(idl))
            seen.update(idl)
            self._emit(out, st, cand[fresh])
        st.done = time.perf_counter()

    def _drain(self, stream) -> list[np.ndarray]:
        return [b for b in stream if len(b)]

    def _id_set(self, streams) -> np.ndarray:
        parts = [b["obj_id"] for s in streams for b in self._drain(s)]
        return np.unique(np.concatenate(parts)) if parts else np.empty(0, np.uint64)

    def _run_setop(self, node, inputs, out, st, keep_members: bool) -> None:
        if keep_members:
            # INTERSECT: an id must occur in every other child.
            sets = [self._id_set([s]) for s in inputs[1:]]
            ref = sets[0]
            for s in sets[1:]:
                ref = np.intersect1d(ref, s, assume_unique=True)
        else:
            ref = self._id_set(inputs[1:])
        st.input_done = time.perf_counter()
        seen: set[int] = set()
        for batch in inputs[0]:
            member = np.isin(batch["obj_id"], ref)
            batch = batch[member if keep_members else ~member]
            _, first = np.unique(batch["obj_id"], return_index=True)
            first.sort()
            batch = batch[first]
            idl = batch["obj_id"].tolist()
            fresh = np.fromiter((i not in seen for i in idl), dtype=bool, count=len(idl))
            seen.update(idl)
            self._emit(out, st, batch[fresh])
        st.done = time.perf_counter()

    def _run_intersect(self, node, inputs, out, st) -> None:
        self._run_setop(node, inputs, out, st, True)

    def _run_except(self, node, inputs, out, st) -> None:
        self._run_setop(node, inputs, out, st, False)

    def _run_sort(self, node, inputs, out, st) -> None:
        batches = self._drain(inputs[0])
        st.input_done = time.perf_counter()
        if batches:
            rec = np.concatenate(batches)
            key = term_values(node.sort.term, rec)
            if node.sort.descending:
                _, inv = np.unique(key, return_inverse=True)
                key = -inv.reshape(-1)
            order = np.lexsort((rec["obj_id"], key))
            rec = rec[order]
            for i in range(0, len(rec), BATCH_ROWS):
                self._emit(out, st, rec[i : i + BATCH_ROWS])
        st.done = time.perf_counter()

    def _run_limit(self, node, inputs, out, st) -> None:
        remaining = node.limit
        src = inputs[0]
        if remaining > 0:
            for batch in src:
                take = batch[:remaining]
                remaining -= len(take)
                self._emit(out, st, take)
                if remaining <= 0:
                    break
        src.cancel()
        st.done = time.perf_counter()

    def _run_aggregate(self, node, inputs, out, st) -> None:
        func, term = node.aggregate
        count = 0
        lo, hi, total = math.inf, -math.inf, 0.0
        for batch in inputs[0]:
            count += len(batch)
            if term is not None and len(batch):
                v = np.asarray(term_values(term, batch), dtype=float)
                lo = min(lo, float(v.min()))
                hi = max(hi, float(v.max()))
                total += float(v.sum())
        st.input_done = time.perf_counter()
        dt = self._dtype
        row = np.zeros(1, dtype=dt)
        name = dt.names[0]
        if func == "COUNT":
            row[name] = count
        elif count == 0:
            row[name] = np.nan
        else:
            row[name] = {"MIN": lo, "MAX": hi, "AVG": total / count}[func]
        self._emit(out, st, row)
        st.done = time.perf_counter()

    def _run_project(self, node, inputs, out, st) -> None:
        dt = self._dtype
        for batch in inputs[0]:
            res = np.empty(len(batch), dtype=dt)
            for name, t in zip(dt.names, node.columns):
                res[name] = term_values(t, batch)
            self._emit(out, st, res)
        st.done = time.perf_counter()


def output_dtype(node: QetNode, catalog) -> np.dtype:
    """Record dtype produced by a plan node."""
    if node.kind == "SCAN":
        return TAG_DTYPE if node.scan.projection == "TAG" else catalog.full_dtype
    if node.kind == "AGGREGATE":
        func, _ = node.aggregate
        name = node.output_columns[0]
        return np.dtype([(name, "<i8" if func == "COUNT" else "<f8")])
    if node.kind == "PROJECT":
        src = output_dtype(node.children[0], catalog)
        fields = []
        for name, t in zip(node.output_columns, node.columns):
            if name in src.names:
                fields.append((name, src.fields[name][0]))
            else:
                fields.append((name, "<f8"))
        return np.dtype(fields)
    return output_dtype(node.children[0], catalog)


def execute(plan: QetNode, catalog, config: EngineConfig | None = None, frames=None) -> QueryExecution:
    """Start executing ``plan``; returns an iterable, closable execution."""
    return QueryExecution(plan, catalog, config, frames)


def scan_engine(catalog, predicate=None, projection: str = "FULL", config=None) -> QueryExecution:
    """Visit every container once, pushing records that satisfy ``predicate``.

    ``predicate`` is a condition AST, condition text, or ``None`` for true.
    """
    if isinstance(predicate, str):
        predicate = parse_condition(predicate)
    cov = htm.Coverage(full=tuple(range(8, 16)), partial=(), level=0)
    spec = ScanSpec(whole_sky(), cov, predicate, projection.upper())
    node = QetNode("SCAN", scan=spec, schema=catalog.schema)
    return execute(node, catalog, config)


# --------------------------------------------------------------------------
# Spatial hash join

PAIR_DTYPE = np.dtype(
    [
        ("obj_a", "<u8"),
        ("obj_b", "<u8"),
        ("sep_arcsec", "<f8"),
        ("d_ug", "<f8"),
        ("d_gr", "<f8"),
        ("d_ri", "<f8"),
        ("d_iz", "<f8"),
    ]
)

PairPredicate = Callable[[np.ndarray, np.ndarray], np.ndarray]
# Candidate dot-product cut, slightly loose; the exact test is atan2-based.
_DOT_SLACK = 1e-12
_PAIR_BLOCK = 2048


def check_bucket_level(bucket_level: int, radius_arcsec: float) -> None:
    if not radius_arcsec > 0 or not math.isfinite(radius_arcsec):
        raise ConfigError("radius must be a positive number of arcseconds")
    if not 0 <= bucket_level <= 8:
        raise ConfigError("bucket_level must be in [0, 8]")
    r_in = htm.min_inradius(bucket_level) / ARCSEC
    if not r_in > 2 * radius_arcsec:
        raise ConfigError(
            f"bucket level {bucket_level} too fine for radius {radius_arcsec:g}\": "
            f"minimum trixel inradius {r_in:.1f}\" must exceed twice the radius"
        )


def _edge_sin_margins(p: np.ndarray, home: np.ndarray) -> np.ndarray:
    """Smallest sine-distance from each point to its home trixel's edges."""
    c = htm.corners_of(home)
    out = np.full(len(p), np.inf)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        n = np.cross(c[:, i], c[:, j])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        out = np.minimum(out, np.abs(np.einsum("ij,ij->i", n, p)))
    return out


def bucket_assignment(pos: np.ndarray, radius_arcsec: float, bucket_level: int):
    """Hash phase: (bucket ids, object indices, home flags, home per object).

    Each object lands in its home bucket and in every other bucket its
    search cap touches.
    """
    n = len(pos)
    home = htm.locate_many(pos, bucket_level) if n else np.empty(0, np.int64)
    r = radius_arcsec * ARCSEC
    inside = _edge_sin_margins(pos, home) > math.sin(r) * (1 + 1e-9) + 1e-15 if n else np.zeros(0, bool)
    buckets = [home[inside]]
    idx = [np.nonzero(inside)[0]]
    for k in np.nonzero(~inside)[0].tolist():
        cov = htm.classify(cap(pos[k], radius_arcsec), bucket_level)
        ids = set()
        for t in itertools.chain(cov.full, cov.partial):
            lo, hi = htm.descendant_range(t, bucket_level) if htm.level(t) < bucket_level else (t, t + 1)
            ids.update(range(lo, hi))
        ids.add(int(home[k]))
        b = np.fromiter(sorted(ids), dtype=np.int64)
        buckets.append(b)
        idx.append(np.full(len(b), k))
    b = np.concatenate(buckets).astype(np.int64)
    i = np.concatenate(idx).astype(np.int64)
    is_home = b == home[i]
    order = np.lexsort((i, b))
    return b[order], i[order], is_home[order], home


def _colors(rec) -> np.ndarray:
    return np.stack([rec[a] - rec[b] for a, b in COLORS], axis=-1)


class JoinExecution(Execution):
    """Streaming pair search over one catalog."""

    _dtype = PAIR_DTYPE

    def __init__(
        self,
        catalog,
        radius_arcsec: float,
        pair_predicate: PairPredicate | None = None,
        config: EngineConfig | None = None,
        left_filter=None,
        right_filter=None,
    ):
        super().__init__(catalog, config)
        level = self.config.bucket_level
        self.bucket_level = catalog.storage_depth if level is None else level
        check_bucket_level(self.bucket_level, radius_arcsec)
        self.radius_arcsec = float(radius_arcsec)
        self.pair_predicate = pair_predicate
        self.symmetric = left_filter is None and right_filter is None
        self.left_filter = _condition(left_filter)
        self.right_filter = _condition(right_filter)
        self._root = self._stream(name="root")
        self.stats = NodeStats("JOIN", started=time.perf_counter())
        self._spawn("join", self._run, self._root)

    def _load(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        parts = [rec for _, rec in self.catalog.iter_containers("TAG", self.metrics.io)]
        tag = np.concatenate(parts) if parts else np.empty(0, TAG_DTYPE)
        self.metrics.add_scanned(len(tag))
        if self.symmetric:
            a = b = np.ones(len(tag), dtype=bool)
        else:
            a = evaluate(self.left_filter, tag) if self.left_filter is not None else np.ones(len(tag), bool)
            b = evaluate(self.right_filter, tag) if self.right_filter is not None else np.ones(len(tag), bool)
        keep = a | b
        return tag[keep], a[keep], b[keep]

    def _run(self) -> None:
        try:
            tag, is_a, is_b = self._load()
            pos = np.stack([tag["cx"], tag["cy"], tag["cz"]], axis=-1)
            bucket, obj, is_home, _ = bucket_assignment(pos, self.radius_arcsec, self.bucket_level)
            starts = np.flatnonzero(np.r_[True, bucket[1:] != bucket[:-1]]) if len(bucket) else np.empty(0, int)
            bounds = list(zip(starts.tolist(), np.r_[starts[1:], len(bucket)].tolist()))
            it = iter(bounds)
            lock = threading.Lock()
            emit_lock = threading.Lock()

            def worker():
                while True:
                    with lock:
                        nxt = next(it, None)
                    if nxt is None or self._cancelled.is_set():
                        return
                    lo, hi = nxt
                    members = obj[lo:hi]
                    rows = members[is_home[lo:hi] & is_a[members]]
                    cols = members[is_b[members]]
                    if not len(rows) or not len(cols):
                        continue
                    for res in self._pairs(tag, pos, rows, cols):
                        with emit_lock:
                            if len(res):
                                if self.stats.first_emit is None:
                                    self.stats.first_emit = time.perf_counter()
                                self._root.put(res)
                                self.stats.rows += len(res)

            self._run_workers(worker, self.config.workers)
        finally:
            self.stats.done = time.perf_counter()

    def _pairs(self, tag, pos, rows, cols) -> Iterator[np.ndarray]:
        r = self.radius_arcsec * ARCSEC
        cos_r = math.cos(r) - _DOT_SLACK
        ids = tag["obj_id"]
        pc = pos[cols]
        for s in range(0, len(rows), _PAIR_BLOCK):
            rb = rows[s : s + _PAIR_BLOCK]
            self.metrics.add_pairs(len(rb) * len(cols))
            dots = pos[rb] @ pc.T
            ii, jj = np.nonzero(dots >= cos_r)
            ia, ib = rb[ii], cols[jj]
            if self.symmetric:
                ok = ids[ia] < ids[ib]
            else:
                ok = ids[ia] != ids[ib]
            ia, ib = ia[ok], ib[ok]
            sep = angular_distance(pos[ia], pos[ib]).reshape(-1)
            ok = sep <= r
            ia, ib, sep = ia[ok], ib[ok], sep[ok]
            if self.pair_predicate is not None and len(ia):
                ok = np.asarray(self.pair_predicate(tag[ia], tag[ib]), dtype=bool)
                ia, ib, sep = ia[ok], ib[ok], sep[ok]
            res = np.empty(len(ia), dtype=PAIR_DTYPE)
            res["obj_a"] = ids[ia]
            res["obj_b"] = ids[ib]
            res["sep_arcsec"] = sep / ARCSEC
            d = _colors(tag[ib]) - _colors(tag[ia]) if len(ia) else np.empty((0, 4))
            for k, name in enumerate(("d_ug", "d_gr", "d_ri", "d_iz")):
                res[name] = d[:, k]
            yield res


def _condition(f):
    if f is None:
        return None
    e = parse_condition(f) if isinstance(f, str) else f
    bad = [a.name for a in referenced_attrs(e) if a.name not in set(TAG_OUTPUT) | DERIVED]
    if bad:
        raise QueryError(f"join filters may only use tag attributes, not {', '.join(sorted(set(bad)))}")
    return e


def hash_join_neighbors(catalog, radius_arcsec: float, pair_predicate=None, config=None) -> JoinExecution:
    """All unordered pairs within ``radius_arcsec`` satisfying ``pair_predicate``."""
    return JoinExecution(catalog, radius_arcsec, pair_predicate, config)


def color_match(color_eps_mag: float = 0.05) -> PairPredicate:
    """Pair predicate: every color index agrees within ``color_eps_mag``."""

    def pred(a, b):
        return np.max(np.abs(_colors(a) - _colors(b)), axis=1) <= color_eps_mag

    return pred


def lens_search(catalog, radius_arcsec: float = 10.0, color_eps_mag: float = 0.05, config=None):
    """Close pairs with matching colors, whatever their brightness."""
    return hash_join_neighbors(catalog, radius_arcsec, color_match(color_eps_mag), config)


def default_primary() -> str:
    return "class = QSO AND r < 22"


def default_companion(faint_g: float = 20.0, blue_gr: float = 0.4) -> str:
    return f"class = GALAXY AND g > {faint_g!r} AND g - r < {blue_gr!r}"


def companion_search(
    catalog,
    primary_filter=None,
    companion_filter=None,
    radius_arcsec: float = 5.0,
    config=None,
    faint_g: float = 20.0,
    blue_gr: float = 0.4,
) -> JoinExecution:
    """Ordered pairs (primary, companion) closer than ``radius_arcsec``.

    Filters are conditions over tag attributes (text or parsed).  The
    defaults look for quasars with r < 22 next to faint blue galaxies.
    """
    primary = default_primary() if primary_filter is None else primary_filter
    companion = default_companion(faint_g, blue_gr) if companion_filter is None else companion_filter
    return JoinExecution(
        catalog, radius_arcsec, None, config, left_filter=primary, right_filter=companion
    )
