"""Row encodings shared by the command line and the HTTP service.

csv follows RFC 4180 (CRLF line ends, quoting only where needed); jsonl
writes one JSON object per line.  Floats use the shortest round-trip
representation so output is byte-stable across runs.
"""

from __future__ import annotations

import csv
import io
import json
import math

import numpy as np

from .store import CLASSES

FORMATS = ("csv", "jsonl")
MEDIA_TYPES = {"csv": "text/csv", "jsonl": "application/x-ndjson"}


def _converters(dtype: np.dtype):
    out = []
    for name in dtype.names:
        kind = dtype.fields[name][0].kind
        if name == "class":
            out.append(lambda v: CLASSES[int(v)])
        elif kind in "ui":
            out.append(int)
        else:
            out.append(float)
    return out


def python_rows(batch: np.ndarray) -> list[list]:
    """Records as lists of plain Python values (class codes become names)."""
    conv = _converters(batch.dtype)
    cols = [batch[name].tolist() for name in batch.dtype.names]
    return [[c(v) for c, v in zip(conv, row)] for row in zip(*cols)]


def _csv_value(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def header(dtype: np.dtype, fmt: str) -> str:
    """Header text for ``fmt`` (empty for jsonl)."""
    if fmt != "csv":
        return ""
    buf = io.StringIO()
    csv.writer(buf).writerow(dtype.names)
    return buf.getvalue()


def encode(batch: np.ndarray, fmt: str) -> str:
    """Encode a record batch as csv rows or jsonl lines."""
    rows = python_rows(batch)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        for r in rows:
            w.writerow([_csv_value(v) for v in r])
        return buf.getvalue()
    if fmt == "jsonl":
        names = batch.dtype.names
        lines = []
        for r in rows:
            obj = {n: (None if isinstance(v, float) and not math.isfinite(v) else v) for n, v in zip(names, r)}
            lines.append(json.dumps(obj, separators=(",", ":")) + "\n")
        return "".join(lines)
    raise ValueError(f"unknown format {fmt!r}")


def sort_records(rec: np.ndarray, keys=("obj_id",)) -> np.ndarray:
    """Stable order for ``--sorted`` output: the given keys, then every column."""
    names = [k for k in keys if k in rec.dtype.names]
    names += [n for n in rec.dtype.names if n not in names]
    return rec[np.lexsort([rec[n] for n in reversed(names)])] if len(rec) else rec
