"""Trixel-keyed object store.

A catalog is a directory::

    CURRENT                  name of the published version
    versions/v000003/
        meta.txt             key=value catalog metadata
        ids.npy              sorted obj_id index (duplicate detection)
        containers/<id>.skya one file per non-empty storage trixel

Each container file holds a fixed header, the tag section (10 popular
attributes per object) and then the full section, so a tag-only scan reads
a prefix of the file.  All integers and reals are little-endian::

    magic "SKYA" | version u16 | trixel u64 | count u64 | tag bytes u64 |
    schema hash u64 | tag records | crc32(header + tag records) u32 |
    full records | crc32(header + full records) u32

Loading writes a new version directory, hard-linking untouched containers
from the previous one, then swaps ``CURRENT`` atomically.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import os
import shutil
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import htm
from .sphere import DomainError, UnitVec, from_lonlat, normalize

FORMAT_VERSION = 1
MAGIC = b"SKYA"
HEADER = struct.Struct("<4sHQQQQ")
CRC = struct.Struct("<I")
DEFAULT_STORAGE_DEPTH = 4

CLASSES = ("STAR", "GALAXY", "QSO", "UNKNOWN")
CLASS_CODE = {name: code for code, name in enumerate(CLASSES)}
BANDS = ("u", "g", "r", "i", "z")
COLORS = (("u", "g"), ("g", "r"), ("r", "i"), ("i", "z"))

_CORE = [
    ("obj_id", "<u8"),
    ("cx", "<f8"),
    ("cy", "<f8"),
    ("cz", "<f8"),
    ("u", "<f8"),
    ("g", "<f8"),
    ("r", "<f8"),
    ("i", "<f8"),
    ("z", "<f8"),
    ("size", "<f8"),
    ("class", "u1"),
]
TAG_DTYPE = np.dtype(_CORE + [("home_trixel", "<u8")])
TAG_ATTRIBUTES = frozenset(TAG_DTYPE.names)
RESERVED = TAG_ATTRIBUTES | {"ra", "dec"}

CSV_HEADER = ("obj_id", "ra_deg", "dec_deg", "u", "g", "r", "i", "z", "size_arcsec", "class")


class StoreError(Exception):
    pass


class ChunkFormatError(StoreError, ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where = f"{source}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class DuplicateIdError(StoreError):
    def __init__(self, ids: Sequence[int]):
        self.ids = list(ids)
        shown = ", ".join(str(i) for i in self.ids[:5])
        more = "" if len(self.ids) <= 5 else f" (+{len(self.ids) - 5} more)"
        super().__init__(f"duplicate obj_id: {shown}{more}; chunk rejected")


class IntegrityError(StoreError):
    def __init__(self, path, message: str):
        self.path = str(path)
        self.detail = message
        super().__init__(f"{path}: {message}")

    def __reduce__(self):
        return (IntegrityError, (self.path, self.detail))


def full_dtype(schema: Sequence[str] = ()) -> np.dtype:
    """Record layout of the full section: core attributes then extras."""
    return np.dtype(_CORE + [(name, "<f8") for name in schema])


def schema_hash(schema: Sequence[str]) -> int:
    digest = hashlib.blake2b(",".join(schema).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def check_schema(schema: Sequence[str]) -> tuple[str, ...]:
    schema = tuple(schema)
    for name in schema:
        if not name.isidentifier() or name.lower() != name:
            raise DomainError(f"extra attribute name {name!r} must be a lower-case identifier")
        if name in RESERVED:
            raise DomainError(f"extra attribute name {name!r} is reserved")
    if len(set(schema)) != len(schema):
        raise DomainError("duplicate extra attribute names")
    return schema


@dataclass(frozen=True)
class SkyObject:
    obj_id: int
    pos: UnitVec
    mag_u: float
    mag_g: float
    mag_r: float
    mag_i: float
    mag_z: float
    size_arcsec: float
    obj_class: str = "UNKNOWN"
    extras: tuple[float, ...] = ()

    @classmethod
    def from_record(cls, rec, schema: Sequence[str] = ()) -> "SkyObject":
        return cls(
            int(rec["obj_id"]),
            UnitVec(float(rec["cx"]), float(rec["cy"]), float(rec["cz"])),
            *(float(rec[b]) for b in BANDS),
            float(rec["size"]),
            CLASSES[int(rec["class"])],
            tuple(float(rec[name]) for name in schema),
        )


def mix64(x) -> np.ndarray:
    """SplitMix64 finalizer over uint64 values."""
    z = np.array(x, dtype=np.uint64, ndmin=1)
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


# --------------------------------------------------------------------------
# Chunks


@dataclass
class Chunk:
    """One ingest file's worth of objects, as full-dtype records."""

    objects: np.ndarray
    schema: tuple[str, ...] = ()
    source: str = "<memory>"

    def __len__(self):
        return len(self.objects)

    @property
    def chunk_id(self) -> str:
        h = hashlib.sha1(np.ascontiguousarray(self.objects).tobytes()).hexdigest()[:16]
        return f"{Path(self.source).name}@{h}"

    @classmethod
    def from_objects(cls, objs: Iterable[SkyObject], schema=(), source="<memory>") -> "Chunk":
        schema = check_schema(schema)
        objs = list(objs)
        rec = np.zeros(len(objs), dtype=full_dtype(schema))
        for k, o in enumerate(objs):
            if len(o.extras) != len(schema):
                raise ChunkFormatError(f"object {o.obj_id}: expected {len(schema)} extras")
            p = normalize(np.asarray(o.pos, dtype=float))
            rec[k] = (
                o.obj_id,
                *p,
                o.mag_u,
                o.mag_g,
                o.mag_r,
                o.mag_i,
                o.mag_z,
                o.size_arcsec,
                CLASS_CODE[o.obj_class],
                *o.extras,
            )
        return cls(rec, schema, source)

    @classmethod
    def from_arrays(
        cls,
        obj_id,
        pos,
        mags,
        size=None,
        obj_class=None,
        extras=None,
        schema=(),
        source="<memory>",
    ) -> "Chunk":
        """Build a chunk from column arrays; ``mags`` is ``(n, 5)`` in u,g,r,i,z."""
        schema = check_schema(schema)
        obj_id = np.asarray(obj_id, dtype=np.uint64)
        n = len(obj_id)
        rec = np.zeros(n, dtype=full_dtype(schema))
        rec["obj_id"] = obj_id
        p = normalize(np.asarray(pos, dtype=float).reshape(n, 3))
        rec["cx"], rec["cy"], rec["cz"] = p[:, 0], p[:, 1], p[:, 2]
        mags = np.asarray(mags, dtype=float).reshape(n, 5)
        for k, b in enumerate(BANDS):
            rec[b] = mags[:, k]
        rec["size"] = 0.0 if size is None else size
        if obj_class is None:
            rec["class"] = CLASS_CODE["UNKNOWN"]
        else:
            oc = np.asarray(obj_class)
            if oc.dtype.kind in "US":
                oc = np.array([CLASS_CODE[str(c)] for c in oc], dtype=np.uint8)
            rec["class"] = oc
        if schema:
            ex = np.asarray(extras, dtype=float).reshape(n, len(schema))
            for k, name in enumerate(schema):
                rec[name] = ex[:, k]
        return cls(rec, schema, source)


def read_csv_chunk(path) -> Chunk:
    """Parse an ingest CSV; errors carry the 1-based line number."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ChunkFormatError("empty file", 1, str(path)) from None
        header = [h.strip() for h in header]
        if tuple(header[: len(CSV_HEADER)]) != CSV_HEADER:
            raise ChunkFormatError(
                "header must start with " + ",".join(CSV_HEADER), 1, str(path)
            )
        try:
            schema = check_schema(header[len(CSV_HEADER) :])
        except DomainError as exc:
            raise ChunkFormatError(str(exc), 1, str(path)) from None
        width = len(header)
        ids, ra, dec, mags, size, cls, extras = [], [], [], [], [], [], []
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise ChunkFormatError(f"expected {width} fields, got {len(row)}", line, str(path))
            try:
                oid = int(row[0])
                if not 0 <= oid < 2**64:
                    raise ValueError("obj_id out of 64-bit unsigned range")
                lon, lat = float(row[1]), float(row[2])
                m = [float(v) for v in row[3:8]]
                s = float(row[8])
                extra = [float(v) for v in row[10:]]
            except ValueError as exc:
                raise ChunkFormatError(f"bad number: {exc}", line, str(path)) from None
            if not -90.0 <= lat <= 90.0:
                raise ChunkFormatError(f"dec_deg {lat} outside [-90, 90]", line, str(path))
            if not np.isfinite(lon) or not all(np.isfinite(m)) or not np.isfinite(s):
                raise ChunkFormatError("non-finite value", line, str(path))
            if s < 0:
                raise ChunkFormatError("size_arcsec must be >= 0", line, str(path))
            c = row[9].strip().upper()
            if c not in CLASS_CODE:
                raise ChunkFormatError(f"unknown class {row[9]!r}", line, str(path))
            ids.append(oid)
            ra.append(lon)
            dec.append(lat)
            mags.append(m)
            size.append(s)
            cls.append(CLASS_CODE[c])
            extras.append(extra)
    n = len(ids)
    pos = from_lonlat(np.array(ra, dtype=float), np.array(dec, dtype=float)).reshape(n, 3)
    return Chunk.from_arrays(
        np.array(ids, dtype=np.uint64),
        pos,
        np.array(mags, dtype=float).reshape(n, 5),
        np.array(size, dtype=float),
        np.array(cls, dtype=np.uint8),
        np.array(extras, dtype=float).reshape(n, len(schema)),
        schema,
        str(path),
    )


# --------------------------------------------------------------------------
# Metadata


@dataclass
class CatalogMeta:
    schema: tuple[str, ...]
    storage_depth: int
    counts: htm.TrixelCounts
    format_version: int = FORMAT_VERSION
    load_history: list[str] = field(default_factory=list)
    version: int = 0

    @property
    def count_level(self) -> int:
        return self.counts.level

    @property
    def total(self) -> int:
        return self.counts.total

    def container_counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        shift = np.uint64(2 * (self.count_level - self.storage_depth))
        for tid, n in zip(self.counts.ids >> shift, self.counts.values):
            out[int(tid)] = out.get(int(tid), 0) + int(n)
        return out

    def to_text(self) -> str:
        lines = [
            f"format_version={self.format_version}",
            f"version={self.version}",
            f"storage_depth={self.storage_depth}",
            f"count_level={self.count_level}",
            f"schema={','.join(self.schema)}",
            f"total={self.total}",
            f"containers={len(self.container_counts())}",
            f"chunks={';'.join(self.load_history)}",
        ]
        lines += [f"count.{tid}={n}" for tid, n in self.counts.as_dict().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, path="meta.txt") -> "CatalogMeta":
        kv: dict[str, str] = {}
        counts: dict[int, int] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise IntegrityError(path, f"malformed line {line!r}")
            if key.startswith("count."):
                counts[int(key[6:])] = int(value)
            else:
                kv[key] = value
        try:
            meta = cls(
                schema=tuple(s for s in kv["schema"].split(",") if s),
                storage_depth=int(kv["storage_depth"]),
                counts=htm.TrixelCounts(int(kv["count_level"]), counts),
                format_version=int(kv["format_version"]),
                load_history=[c for c in kv["chunks"].split(";") if c],
                version=int(kv["version"]),
            )
        except (KeyError, ValueError) as exc:
            raise IntegrityError(path, f"bad metadata: {exc}") from None
        if meta.total != int(kv.get("total", -1)):
            raise IntegrityError(path, "per-trixel counts do not sum to total")
        return meta


# --------------------------------------------------------------------------
# I/O accounting


class IOCounter:
    """Thread-safe tally of container reads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.containers_opened = 0
        self.bytes_tag = 0
        self.bytes_full = 0

    def add(self, projection: str, nbytes: int) -> None:
        with self._lock:
            self.containers_opened += 1
            if projection == "TAG":
                self.bytes_tag += nbytes
            else:
                self.bytes_full += nbytes

    @property
    def bytes_read(self) -> int:
        return self.bytes_tag + self.bytes_full


def encode_container(tid: int, full: np.ndarray, home: np.ndarray, schema) -> bytes:
    tag = np.zeros(len(full), dtype=TAG_DTYPE)
    for name in TAG_DTYPE.names:
        if name != "home_trixel":
            tag[name] = full[name]
    tag["home_trixel"] = home
    tag_bytes = tag.tobytes()
    full_bytes = np.ascontiguousarray(full, dtype=full_dtype(schema)).tobytes()
    head = HEADER.pack(MAGIC, FORMAT_VERSION, tid, len(full), len(tag_bytes), schema_hash(schema))
    return b"".join(
        [
            head,
            tag_bytes,
            CRC.pack(zlib.crc32(tag_bytes, zlib.crc32(head))),
            full_bytes,
            CRC.pack(zlib.crc32(full_bytes, zlib.crc32(head))),
        ]
    )


def read_container_file(
    path, projection: str, schema: Sequence[str], tid: int | None = None, counter=None
) -> np.ndarray:
    """Decode one section of a container file, verifying header and CRC."""
    dtype = TAG_DTYPE if projection == "TAG" else full_dtype(schema)
    try:
        with open(path, "rb") as fh:
            head = fh.read(HEADER.size)
            if len(head) != HEADER.size:
                raise IntegrityError(path, "truncated header")
            magic, version, trixel, count, tag_len, shash = HEADER.unpack(head)
            if magic != MAGIC:
                raise IntegrityError(path, "bad magic")
            if version != FORMAT_VERSION:
                raise IntegrityError(path, f"unsupported format version {version}")
            if tid is not None and trixel != tid:
                raise IntegrityError(path, f"header trixel {trixel} != {tid}")
            if shash != schema_hash(schema):
                raise IntegrityError(path, "schema hash mismatch")
            if tag_len != count * TAG_DTYPE.itemsize:
                raise IntegrityError(path, "tag section length mismatch")
            if projection == "TAG":
                size = tag_len
            else:
                fh.seek(tag_len + CRC.size, os.SEEK_CUR)
                size = count * dtype.itemsize
            body = fh.read(size + CRC.size)
    except OSError as exc:
        raise StoreError(f"{path}: {exc}") from exc
    if counter is not None:
        counter.add(projection, HEADER.size + len(body))
    if len(body) != size + CRC.size:
        raise IntegrityError(path, f"truncated {projection.lower()} section")
    (crc,) = CRC.unpack(body[size:])
    if zlib.crc32(body[:size], zlib.crc32(head)) != crc:
        raise IntegrityError(path, f"{projection.lower()} section checksum mismatch")
    return np.frombuffer(body, dtype=dtype, count=count)


def tag_view(full: np.ndarray, storage_depth: int) -> np.ndarray:
    """Tag records for full records (computing home trixels)."""
    tag = np.zeros(len(full), dtype=TAG_DTYPE)
    for name in TAG_DTYPE.names:
        if name != "home_trixel":
            tag[name] = full[name]
    tag["home_trixel"] = htm.locate_many(positions(full), storage_depth)
    return tag


def positions(records: np.ndarray) -> np.ndarray:
    return np.stack([records["cx"], records["cy"], records["cz"]], axis=-1)


# --------------------------------------------------------------------------
# Catalog


@dataclass
class LoadReport:
    objects_loaded: int
    containers_touched: int
    touches: dict[int, int]
    duration_s: float
    chunk_id: str = ""

    def summary(self) -> str:
        return (
            f"objects={self.objects_loaded} containers={self.containers_touched} "
            f"duration={self.duration_s:.3f}s"
        )


class Catalog:
    """A published catalog version, opened for reading."""

    def __init__(self, path):
        self.path = Path(path)
        current = self.path / "CURRENT"
        if not current.exists():
            raise StoreError(f"{self.path}: not a catalog (no CURRENT file)")
        self.version_dir = self.path / "versions" / current.read_text().strip()
        meta_path = self.version_dir / "meta.txt"
        try:
            self.meta = CatalogMeta.from_text(meta_path.read_text(), meta_path)
        except OSError as exc:
            raise StoreError(f"{meta_path}: {exc}") from exc
        self._container_counts = self.meta.container_counts()

    @classmethod
    def create(cls, path, schema=(), storage_depth: int = DEFAULT_STORAGE_DEPTH) -> "Catalog":
        path = Path(path)
        if (path / "CURRENT").exists():
            raise StoreError(f"{path}: catalog already exists")
        if not 0 <= storage_depth <= htm.MAX_LEVEL - 2:
            raise DomainError("storage depth out of range")
        meta = CatalogMeta(
            check_schema(schema), storage_depth, htm.TrixelCounts(storage_depth + 2, {})
        )
        path.mkdir(parents=True, exist_ok=True)
        _publish(path, meta, {}, np.empty(0, dtype=np.uint64), previous=None)
        return cls(path)

    @classmethod
    def open_or_create(cls, path, schema=(), storage_depth=DEFAULT_STORAGE_DEPTH) -> "Catalog":
        if (Path(path) / "CURRENT").exists():
            return cls(path)
        return cls.create(path, schema, storage_depth)

    # -- properties

    @property
    def schema(self) -> tuple[str, ...]:
        return self.meta.schema

    @property
    def storage_depth(self) -> int:
        return self.meta.storage_depth

    @property
    def full_dtype(self) -> np.dtype:
        return full_dtype(self.schema)

    @property
    def total(self) -> int:
        return self.meta.total

    def containers(self) -> list[tuple[int, int]]:
        """``(trixel id, count)`` for every non-empty container, by id."""
        return sorted(self._container_counts.items())

    def container_file(self, tid: int) -> Path:
        return self.version_dir / "containers" / f"{int(tid)}.skya"

    def read_container(self, tid: int, projection: str = "FULL", counter=None) -> np.ndarray:
        return read_container_file(
            self.container_file(tid), projection, self.schema, int(tid), counter
        )

    def iter_containers(self, projection="FULL", counter=None) -> Iterator[tuple[int, np.ndarray]]:
        for tid, _ in self.containers():
            yield tid, self.read_container(tid, projection, counter)

    def all_records(self, projection="FULL") -> np.ndarray:
        parts = [rec for _, rec in self.iter_containers(projection)]
        dtype = TAG_DTYPE if projection == "TAG" else self.full_dtype
        return np.concatenate(parts) if parts else np.empty(0, dtype=dtype)

    def object_ids(self) -> np.ndarray:
        return np.load(self.version_dir / "ids.npy")

    def refresh(self) -> "Catalog":
        return Catalog(self.path)

    # -- loading

    def ingest(self, chunk: Chunk) -> LoadReport:
        """Load one chunk, touching each affected container exactly once."""
        t0 = time.perf_counter()
        with _writer_lock(self.path):
            cur = Catalog(self.path)
            report = cur._ingest_locked(chunk)
        fresh = Catalog(self.path)
        self.__dict__.update(fresh.__dict__)
        report.duration_s = time.perf_counter() - t0
        return report

    def ingest_csv(self, path) -> LoadReport:
        return self.ingest(read_csv_chunk(path))

    def _ingest_locked(self, chunk: Chunk) -> LoadReport:
        if tuple(chunk.schema) != self.schema:
            raise ChunkFormatError(
                f"chunk schema {list(chunk.schema)} does not match catalog {list(self.schema)}",
                source=chunk.source,
            )
        if len(chunk) == 0:
            return LoadReport(0, 0, {}, 0.0, chunk.chunk_id)
        objs = np.asarray(chunk.objects, dtype=self.full_dtype)
        ids = objs["obj_id"]
        uniq, counts = np.unique(ids, return_counts=True)
        if (counts > 1).any():
            raise DuplicateIdError(uniq[counts > 1].tolist())
        existing = self.object_ids()
        clash = uniq[np.isin(uniq, existing)]
        if len(clash):
            raise DuplicateIdError(clash.tolist())

        # phase 1: index the chunk
        depth = self.storage_depth
        fine = htm.locate_many(positions(objs), depth + 2)
        home = fine >> np.uint64(4)
        order = np.lexsort((ids, fine))
        objs, fine, home = objs[order], fine[order], home[order]
        affected, starts = np.unique(home, return_index=True)
        bounds = list(starts) + [len(objs)]

        # phase 2: one write per affected container
        writes: dict[int, bytes] = {}
        old = {t: self.read_container(t, "FULL") for t in affected.tolist() if t in self._container_counts}
        old_fine = _split_fine(old, depth + 2)
        for k, tid in enumerate(affected.tolist()):
            new = objs[bounds[k] : bounds[k + 1]]
            new_fine = fine[bounds[k] : bounds[k + 1]]
            if tid in old:
                new = np.concatenate([old[tid], new])
                new_fine = np.concatenate([old_fine[tid], new_fine])
                o = np.lexsort((new["obj_id"], new_fine))
                new, new_fine = new[o], new_fine[o]
            writes[tid] = encode_container(tid, new, new_fine >> np.uint64(4), self.schema)

        fc, nc = np.unique(fine, return_counts=True)
        merged = self.meta.counts.as_dict()
        for t, n in zip(fc.tolist(), nc.tolist()):
            merged[t] = merged.get(t, 0) + n
        meta = CatalogMeta(
            self.schema,
            depth,
            htm.TrixelCounts(depth + 2, merged),
            load_history=self.meta.load_history + [chunk.chunk_id],
            version=self.meta.version + 1,
        )
        all_ids = np.union1d(existing, uniq)
        touches = _publish(self.path, meta, writes, all_ids, previous=self)
        return LoadReport(len(objs), len(touches), touches, 0.0, chunk.chunk_id)


def _split_fine(groups: dict[int, np.ndarray], lv: int) -> dict[int, np.ndarray]:
    """Locate the records of several containers in one vectorized pass."""
    if not groups:
        return {}
    fine = htm.locate_many(np.concatenate([positions(g) for g in groups.values()]), lv)
    out, start = {}, 0
    for tid, g in groups.items():
        out[tid] = fine[start : start + len(g)]
        start += len(g)
    return out


class _writer_lock:
    def __init__(self, path: Path):
        self.path = path / ".lock"

    def __enter__(self):
        self.fh = open(self.path, "a")
        fcntl.flock(self.fh, fcntl.LOCK_EX)
        return self

    def __exit__(self, *exc):
        fcntl.flock(self.fh, fcntl.LOCK_UN)
        self.fh.close()


def _publish(
    path: Path, meta: CatalogMeta, writes: dict[int, bytes], ids, previous
) -> dict[int, int]:
    """Write a complete version directory and switch CURRENT to it.

    Returns the number of times each container file was opened for writing.
    """
    opens: dict[int, int] = {}
    versions = path / "versions"
    versions.mkdir(exist_ok=True)
    name = f"v{meta.version:06d}"
    tmp = versions / f".tmp-{name}"
    if tmp.exists():
        shutil.rmtree(tmp)
    (tmp / "containers").mkdir(parents=True)
    if previous is not None:
        for tid, _ in previous.containers():
            if tid not in writes:
                os.link(previous.container_file(tid), tmp / "containers" / f"{tid}.skya")
    for tid, blob in writes.items():
        with open(tmp / "containers" / f"{tid}.skya", "wb") as fh:
            opens[tid] = opens.get(tid, 0) + 1
            fh.write(blob)
    with open(tmp / "ids.npy", "wb") as fh:
        np.save(fh, np.asarray(ids, dtype=np.uint64))
    (tmp / "meta.txt").write_text(meta.to_text())
    final = versions / name
    if final.exists():
        shutil.rmtree(final)
    os.rename(tmp, final)
    cur_tmp = path / "CURRENT.tmp"
    cur_tmp.write_text(name + "\n")
    os.replace(cur_tmp, path / "CURRENT")
    keep = {name, previous.version_dir.name if previous is not None else name}
    for d in versions.iterdir():
        if d.name not in keep and not d.name.startswith(".tmp-"):
            shutil.rmtree(d, ignore_errors=True)
    return opens


# --------------------------------------------------------------------------
# Sampling and statistics


def sample(catalog: Catalog, fraction: float, seed: int, dest) -> Catalog:
    """Write the deterministic hash sample of ``catalog`` to ``dest``.

    An object is kept iff ``mix64(obj_id ^ seed) / 2**64 < fraction``.
    """
    if not 0.0 < fraction <= 1.0:
        raise DomainError("sample fraction must be in (0, 1]")
    dest = Path(dest)
    if (dest / "CURRENT").exists():
        raise StoreError(f"{dest}: catalog already exists")
    seed = np.uint64(int(seed) & (2**64 - 1))
    threshold = None if fraction >= 1.0 else np.uint64(int(fraction * 2.0**64))
    depth = catalog.storage_depth
    kept: dict[int, np.ndarray] = {}
    for tid, full in catalog.iter_containers("FULL"):
        keep = np.ones(len(full), dtype=bool)
        if threshold is not None:
            keep = mix64(full["obj_id"] ^ seed) < threshold
        if keep.any():
            kept[tid] = full[keep]
    fine = _split_fine(kept, depth + 2)
    writes: dict[int, bytes] = {}
    counts: dict[int, int] = {}
    for tid, sub in kept.items():
        writes[tid] = encode_container(tid, sub, fine[tid] >> np.uint64(4), catalog.schema)
        for t, n in zip(*np.unique(fine[tid], return_counts=True)):
            counts[int(t)] = counts.get(int(t), 0) + int(n)
    kept_ids = [sub["obj_id"] for sub in kept.values()]
    meta = CatalogMeta(
        catalog.schema,
        depth,
        htm.TrixelCounts(depth + 2, counts),
        load_history=catalog.meta.load_history + [f"sample(fraction={fraction!r},seed={int(seed)})"],
        version=1,
    )
    ids = np.sort(np.concatenate(kept_ids)) if kept_ids else np.empty(0, dtype=np.uint64)
    dest.mkdir(parents=True, exist_ok=True)
    _publish(dest, meta, writes, ids, previous=None)
    return Catalog(dest)


@dataclass
class CatalogStats:
    total: int
    containers: dict[int, int]
    ranges: dict[str, tuple[float, float]]

    def lines(self) -> list[str]:
        out = [f"total={self.total}", f"containers={len(self.containers)}"]
        for name, (lo, hi) in self.ranges.items():
            out.append(f"{name}.min={lo!r}")
            out.append(f"{name}.max={hi!r}")
        return out


def stats(catalog: Catalog) -> CatalogStats:
    """Per-container counts and attribute ranges, checking every header."""
    counts: dict[int, int] = {}
    lo = {name: np.inf for name in BANDS + ("size",)}
    hi = {name: -np.inf for name in BANDS + ("size",)}
    expected = dict(catalog.containers())
    for tid, n in expected.items():
        path = catalog.container_file(tid)
        tag = read_container_file(path, "TAG", catalog.schema, tid)
        if len(tag) != n:
            raise IntegrityError(path, f"header count {len(tag)} != metadata count {n}")
        if np.any(tag["home_trixel"] != np.uint64(tid)):
            raise IntegrityError(path, "record stored outside its home trixel")
        counts[tid] = len(tag)
        for name in lo:
            lo[name] = min(lo[name], float(tag[name].min()))
            hi[name] = max(hi[name], float(tag[name].max()))
    total = sum(counts.values())
    if total != catalog.total:
        raise IntegrityError(catalog.version_dir / "meta.txt", "totals disagree with containers")
    ranges = {k: (lo[k], hi[k]) for k in lo} if total else {}
    return CatalogStats(total, counts, ranges)
