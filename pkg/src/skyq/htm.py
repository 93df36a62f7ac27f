"""Hierarchical triangular mesh.

The sphere is split into the eight faces of an octahedron, and every
spherical triangle ("trixel") is split recursively into four children by
joining the normalized midpoints of its edges.  A trixel id encodes its path
in the quad-tree: base trixels are 8..15 and child ``i`` of ``t`` is
``4*t + i``, so the depth of an id follows from its bit length and the
descendants of ``t`` at ``k`` levels below form the contiguous range
``[t * 4**k, (t + 1) * 4**k)``.

Child order for a trixel ``(v0, v1, v2)`` with edge midpoints
``w0 = mid(v1, v2)``, ``w1 = mid(v0, v2)``, ``w2 = mid(v0, v1)`` is::

    0: (v0, w2, w1)   1: (v1, w0, w2)   2: (v2, w1, w0)   3: (w0, w1, w2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from .sphere import DomainError, Region, as_region, normalize

MAX_LEVEL = 24
EDGE_TOL = 1e-15
# Margin used by the region classifier; anything this close to a boundary is
# reported PARTIAL rather than risk a wrong FULL/REJECT verdict.
CLASSIFY_EPS = 1e-12

REJECT, PARTIAL, FULL = 0, 1, 2

_LOCATE_BLOCK = 1 << 16

_V = np.array(
    [
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, -1.0],
    ]
)
_BASE = [
    (8, "S0", (1, 5, 2)),
    (9, "S1", (2, 5, 3)),
    (10, "S2", (3, 5, 4)),
    (11, "S3", (4, 5, 1)),
    (12, "N0", (1, 0, 4)),
    (13, "N1", (4, 0, 3)),
    (14, "N2", (3, 0, 2)),
    (15, "N3", (2, 0, 1)),
]
BASE_NAMES = {tid: name for tid, name, _ in _BASE}
BASE_IDS = {name: tid for tid, name, _ in _BASE}
BASE_CORNERS = np.array([[_V[i] for i in idx] for _, _, idx in _BASE])


# --------------------------------------------------------------------------
# Id algebra


def level(tid: int) -> int:
    tid = int(tid)
    bl = tid.bit_length()
    if tid < 8 or bl % 2:
        raise DomainError(f"invalid trixel id {tid}")
    return (bl - 4) // 2


def is_valid(tid: int) -> bool:
    tid = int(tid)
    return tid >= 8 and tid.bit_length() % 2 == 0 and level(tid) <= MAX_LEVEL


def parent(tid: int) -> int:
    if level(tid) == 0:
        raise DomainError(f"base trixel {tid} has no parent")
    return int(tid) >> 2


def children(tid: int) -> list[int]:
    level(tid)
    return [4 * int(tid) + i for i in range(4)]


def ancestor(tid: int, at_level: int) -> int:
    lv = level(tid)
    if at_level > lv:
        raise DomainError(f"trixel {tid} is above level {at_level}")
    return int(tid) >> (2 * (lv - at_level))


def descendant_range(tid: int, at_level: int) -> tuple[int, int]:
    """Half-open id range of the descendants of ``tid`` at ``at_level``."""
    shift = 2 * (at_level - level(tid))
    if shift < 0:
        raise DomainError(f"level {at_level} is above trixel {tid}")
    return int(tid) << shift, (int(tid) + 1) << shift


def trixel_name(tid: int) -> str:
    """Render an id as a base name plus child digits, e.g. ``N3:012``."""
    lv = level(tid)
    base = int(tid) >> (2 * lv)
    digits = "".join(str((int(tid) >> (2 * k)) & 3) for k in range(lv - 1, -1, -1))
    return BASE_NAMES[base] + (":" + digits if digits else "")


def parse_trixel(text: str) -> int:
    """Accept a numeric id or a name such as ``N3:012``."""
    text = text.strip()
    if text.isdigit():
        tid = int(text)
        level(tid)
        return tid
    head, _, digits = text.upper().partition(":")
    if len(head) > 2 and not digits:
        head, digits = head[:2], head[2:]
    if head not in BASE_IDS or any(c not in "0123" for c in digits):
        raise DomainError(f"bad trixel name {text!r}")
    tid = BASE_IDS[head]
    for c in digits:
        tid = 4 * tid + int(c)
    return tid


# --------------------------------------------------------------------------
# Geometry


@dataclass(frozen=True, eq=False)
class Trixel:
    id: int
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    @property
    def corners(self) -> np.ndarray:
        return np.stack([self.v0, self.v1, self.v2])

    @property
    def level(self) -> int:
        return level(self.id)

    @property
    def name(self) -> str:
        return trixel_name(self.id)

    def contains(self, p, tol: float = EDGE_TOL):
        p = np.asarray(p, dtype=float)
        pts = np.atleast_2d(p)
        ok = _edge_margin(np.broadcast_to(self.corners, (len(pts), 3, 3)), pts) >= -tol
        return bool(ok[0]) if p.ndim == 1 else ok


def base_trixels() -> list[Trixel]:
    return [Trixel(tid, *BASE_CORNERS[k].copy()) for k, (tid, _, _) in enumerate(_BASE)]


def _subdivide_corners(c: np.ndarray) -> np.ndarray:
    """``(n, 3, 3)`` corner array -> ``(n, 4, 3, 3)`` child corners."""
    v0, v1, v2 = c[:, 0], c[:, 1], c[:, 2]
    w0 = normalize(v1 + v2)
    w1 = normalize(v0 + v2)
    w2 = normalize(v0 + v1)
    return np.stack(
        [
            np.stack([v0, w2, w1], axis=1),
            np.stack([v1, w0, w2], axis=1),
            np.stack([v2, w1, w0], axis=1),
            np.stack([w0, w1, w2], axis=1),
        ],
        axis=1,
    )


def subdivide(t: Trixel) -> list[Trixel]:
    kids = _subdivide_corners(t.corners[None])[0]
    return [Trixel(4 * t.id + i, *kids[i]) for i in range(4)]


def trixel(tid: int) -> Trixel:
    """Rebuild a trixel's geometry by descending from its base trixel."""
    lv = level(tid)
    base = int(tid) >> (2 * lv)
    c = BASE_CORNERS[base - 8][None]
    for k in range(lv - 1, -1, -1):
        c = _subdivide_corners(c)[:, (int(tid) >> (2 * k)) & 3]
    return Trixel(int(tid), *c[0])


def trixels_at_level(lv: int) -> tuple[np.ndarray, np.ndarray]:
    """All ids and corners at one level, in id order."""
    if not 0 <= lv <= 10:
        raise DomainError("enumeration is limited to levels 0..10")
    ids = np.arange(8, 16, dtype=np.uint64)
    c = BASE_CORNERS.copy()
    for _ in range(lv):
        c = _subdivide_corners(c).reshape(-1, 3, 3)
        ids = (ids[:, None] * np.uint64(4) + np.arange(4, dtype=np.uint64)).reshape(-1)
    return ids, c


def corners_of(ids) -> np.ndarray:
    """Corner arrays ``(n, 3, 3)`` for many ids (levels may differ)."""
    ids = np.asarray(ids, dtype=np.uint64).reshape(-1)
    out = np.empty((len(ids), 3, 3))
    if ids.size == 0:
        return out
    lvs = np.array([level(int(t)) for t in ids]) if len(ids) < 64 else _levels(ids)
    for lv in np.unique(lvs).tolist():
        sel = lvs == lv
        sub = ids[sel]
        c = BASE_CORNERS[(sub >> np.uint64(2 * lv)).astype(np.int64) - 8]
        for k in range(lv - 1, -1, -1):
            digit = ((sub >> np.uint64(2 * k)) & np.uint64(3)).astype(np.int64)
            c = _subdivide_corners(c)[np.arange(len(sub)), digit]
        out[sel] = c
    return out


def _levels(ids: np.ndarray) -> np.ndarray:
    lv = np.zeros(len(ids), dtype=np.int64)
    t = ids.copy()
    while True:
        big = t >= np.uint64(16)
        if not big.any():
            break
        t[big] >>= np.uint64(2)
        lv[big] += 1
    if ((t < 8) | (t > 15)).any():
        raise DomainError("invalid trixel id")
    return lv


def solid_angles(corners) -> np.ndarray:
    """Spherical excess of ``(n, 3, 3)`` triangles (Van Oosterom-Strackee)."""
    c = np.asarray(corners, dtype=float)
    a, b, d = c[..., 0, :], c[..., 1, :], c[..., 2, :]
    num = np.abs(np.sum(a * np.cross(b, d), axis=-1))
    den = 1.0 + np.sum(a * b, axis=-1) + np.sum(b * d, axis=-1) + np.sum(d * a, axis=-1)
    return 2.0 * np.arctan2(num, den)


def trixel_solid_angle(t: Trixel) -> float:
    return float(solid_angles(t.corners))


@lru_cache(maxsize=None)
def min_inradius(lv: int) -> float:
    """Smallest inscribed-circle radius (radians) over all trixels at ``lv``."""
    if lv > 8:
        raise DomainError("inradius table is limited to levels 0..8")
    _, c = trixels_at_level(lv)
    a = _arc(c[:, 1], c[:, 2])
    b = _arc(c[:, 0], c[:, 2])
    d = _arc(c[:, 0], c[:, 1])
    s = 0.5 * (a + b + d)
    tan_r = np.sqrt(np.sin(s - a) * np.sin(s - b) * np.sin(s - d) / np.sin(s))
    return float(np.arctan(tan_r).min())


def _arc(p, q):
    return np.arctan2(np.linalg.norm(np.cross(p, q), axis=-1), np.sum(p * q, axis=-1))


# --------------------------------------------------------------------------
# Point location


def _triple(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``(a x b) . p`` over the last axis, written out to avoid ``np.cross`` overhead."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return (a1 * b2 - a2 * b1) * p[..., 0] + (a2 * b0 - a0 * b2) * p[..., 1] + (a0 * b1 - a1 * b0) * p[..., 2]


def _edge_margin(c: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Smallest of the three directed edge tests of ``p`` against ``c``.

    ``c`` is ``(..., 3, 3)`` and ``p`` broadcasts against ``(..., 3)``.
    """
    v0, v1, v2 = c[..., 0, :], c[..., 1, :], c[..., 2, :]
    e0 = _triple(v0, v1, p)
    e1 = _triple(v1, v2, p)
    e2 = _triple(v2, v0, p)
    return np.minimum(np.minimum(e0, e1), e2)


def _first_containing(cands: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Index of the first candidate (axis 1 of ``cands``) containing each point.

    Points that no candidate contains (possible only through rounding) go to
    the candidate with the largest edge margin.
    """
    margins = _edge_margin(cands, p[:, None, :])
    ok = margins >= -EDGE_TOL
    first = np.argmax(ok, axis=1)
    none = ~ok.any(axis=1)
    if none.any():
        first[none] = np.argmax(margins[none], axis=1)
    return first


def locate_many(points, lv: int) -> np.ndarray:
    """Trixel ids at level ``lv`` for an ``(n, 3)`` array of unit vectors."""
    if not 0 <= lv <= MAX_LEVEL:
        raise DomainError(f"level must be within 0..{MAX_LEVEL}")
    p = np.atleast_2d(np.asarray(points, dtype=float))
    if len(p) > _LOCATE_BLOCK:
        return np.concatenate(
            [locate_many(p[i : i + _LOCATE_BLOCK], lv) for i in range(0, len(p), _LOCATE_BLOCK)]
        )
    n = len(p)
    if n == 0:
        return np.empty(0, dtype=np.uint64)
    base = _first_containing(np.broadcast_to(BASE_CORNERS, (n, 8, 3, 3)), p)
    ids = base.astype(np.uint64) + np.uint64(8)
    v0, v1, v2 = (BASE_CORNERS[base][:, j] for j in range(3))
    for _ in range(lv):
        w0 = normalize(v1 + v2)
        w1 = normalize(v0 + v2)
        w2 = normalize(v0 + v1)
        # Inside the parent, child i (i < 3) only adds the inner edge opposite
        # its parent corner; first match in child order wins, else the centre.
        in0 = _triple(w2, w1, p) >= -EDGE_TOL
        in1 = ~in0 & (_triple(w0, w2, p) >= -EDGE_TOL)
        in2 = ~in0 & ~in1 & (_triple(w1, w0, p) >= -EDGE_TOL)
        k = np.where(in0, 0, np.where(in1, 1, np.where(in2, 2, 3)))
        ids = ids * np.uint64(4) + k.astype(np.uint64)
        m0, m1, m2 = in0[:, None], in1[:, None], in2[:, None]
        v0, v1, v2 = (
            np.where(m0, v0, np.where(m1, v1, np.where(m2, v2, w0))),
            np.where(m0, w2, np.where(m1, w0, np.where(m2, w1, w1))),
            np.where(m0, w1, np.where(m1, w2, np.where(m2, w0, w2))),
        )
    return ids


def locate(p, lv: int) -> int:
    return int(locate_many(np.asarray(p, dtype=float)[None], lv)[0])


# --------------------------------------------------------------------------
# Region classification


@dataclass(frozen=True)
class Coverage:
    """Trixels fully inside a region and those bisected at ``level``."""

    full: tuple[int, ...]
    partial: tuple[int, ...]
    level: int

    @property
    def is_empty(self) -> bool:
        return not self.full and not self.partial

    def __len__(self):
        return len(self.full) + len(self.partial)


def _point_in(c: np.ndarray, p: np.ndarray, tol: float) -> np.ndarray:
    return _edge_margin(c, np.broadcast_to(p, (len(c), 3))) >= -tol


def _edges_cross_circle(c: np.ndarray, n: np.ndarray, d: float) -> np.ndarray:
    """Whether the circle ``n . p = d`` meets any edge of each triangle.

    An arc from ``a`` to ``b`` is ``a cos t + u sin t`` for ``t`` in
    ``[0, theta]``; along it ``n . p = A cos t + B sin t = R cos(t - phi)``.
    Near-tangent and near-endpoint cases count as crossings.
    """
    hit = np.zeros(len(c), dtype=bool)
    tol = 1e-9
    for i, j in ((0, 1), (1, 2), (2, 0)):
        a, b = c[:, i], c[:, j]
        ab = np.sum(a * b, axis=-1)
        u = normalize(b - ab[:, None] * a)
        theta = np.arctan2(np.linalg.norm(np.cross(a, b), axis=-1), ab)
        A = a @ n
        B = u @ n
        R = np.hypot(A, B)
        reach = R >= abs(d) - CLASSIFY_EPS
        phi = np.arctan2(B, A)
        with np.errstate(invalid="ignore", divide="ignore"):
            delta = np.arccos(np.clip(d / np.where(R > 0, R, 1.0), -1.0, 1.0))
        for t in (phi - delta, phi + delta):
            t = np.mod(t + tol, 2 * math.pi) - tol
            hit |= reach & (t >= -tol) & (t <= theta + tol)
    return hit


def _classify_halfspace(c: np.ndarray, n: np.ndarray, d: float) -> np.ndarray:
    if d <= -1.0:
        return np.full(len(c), FULL, dtype=np.int8)
    s = c @ n
    inside = (s > d + CLASSIFY_EPS).sum(axis=1)
    outside = (s < d - CLASSIFY_EPS).sum(axis=1)
    verdict = np.full(len(c), PARTIAL, dtype=np.int8)
    all_in = inside == 3
    all_out = outside == 3
    cand = all_in | all_out
    if cand.any():
        cc = c[cand]
        crosses = _edges_cross_circle(cc, n, d)
        hole_inside = _point_in(cc, -n, CLASSIFY_EPS)
        cap_inside = _point_in(cc, n, CLASSIFY_EPS)
        sub = np.full(len(cc), PARTIAL, dtype=np.int8)
        ai, ao = all_in[cand], all_out[cand]
        sub[ai & ~crosses & ~hole_inside] = FULL
        sub[ao & ~crosses & ~cap_inside] = REJECT
        verdict[cand] = sub
    return verdict


def classify_corners(region: Region, c: np.ndarray) -> np.ndarray:
    """FULL / PARTIAL / REJECT verdict of ``region`` for each triangle."""
    out = np.full(len(c), REJECT, dtype=np.int8)
    for convex in region.convexes:
        v = np.full(len(c), FULL, dtype=np.int8)
        for h in convex.constraints:
            live = v != REJECT
            if not live.any():
                break
            v[live] = np.minimum(v[live], _classify_halfspace(c[live], h.normal, h.offset))
        out = np.maximum(out, v)
    return out


def classify(region, lv: int) -> Coverage:
    """Descend the mesh, recording FULL trixels and PARTIAL ones at ``lv``."""
    if not 0 <= lv <= MAX_LEVEL:
        raise DomainError(f"level must be within 0..{MAX_LEVEL}")
    region = as_region(region)
    full: list[int] = []
    partial: list[int] = []
    ids = np.arange(8, 16, dtype=np.uint64)
    c = BASE_CORNERS.copy()
    depth = 0
    while len(ids):
        v = classify_corners(region, c)
        full.extend(int(t) for t in ids[v == FULL])
        keep = v == PARTIAL
        if depth == lv:
            partial.extend(int(t) for t in ids[keep])
            break
        ids, c = ids[keep], c[keep]
        c = _subdivide_corners(c).reshape(-1, 3, 3)
        ids = (ids[:, None] * np.uint64(4) + np.arange(4, dtype=np.uint64)).reshape(-1)
        depth += 1
    return Coverage(tuple(sorted(full)), tuple(sorted(partial)), lv)


# --------------------------------------------------------------------------
# Selectivity


class TrixelCounts:
    """Object counts per trixel at a single level, stored sparsely."""

    def __init__(self, lv: int, counts: Mapping[int, int]):
        self.level = lv
        items = sorted((int(k), int(v)) for k, v in counts.items() if v)
        for k, _ in items:
            if level(k) != lv:
                raise DomainError(f"count for trixel {k} is not at level {lv}")
        self.ids = np.array([k for k, _ in items], dtype=np.uint64)
        self.values = np.array([v for _, v in items], dtype=np.int64)
        self._cum = np.concatenate([[0], np.cumsum(self.values)])

    @property
    def total(self) -> int:
        return int(self._cum[-1])

    def as_dict(self) -> dict[int, int]:
        return {int(k): int(v) for k, v in zip(self.ids, self.values)}

    def subtree(self, tid: int) -> int:
        lo, hi = descendant_range(tid, self.level)
        i = np.searchsorted(self.ids, np.uint64(lo))
        j = np.searchsorted(self.ids, np.uint64(hi))
        return int(self._cum[j] - self._cum[i])


def estimate_selectivity(
    coverage: Coverage, counts: TrixelCounts | None, partial_fraction: float = 0.5
) -> tuple[int, float, int]:
    """Bracket the number of objects a coverage can return.

    Trixels finer than the count granularity cannot be credited as fully
    covered, so their count-level ancestors are charged as partial.
    """
    if counts is None:
        raise DomainError("no per-trixel counts available")
    lo = 0
    partial_anc: set[int] = set()
    for tid in coverage.full:
        if level(tid) <= counts.level:
            lo += counts.subtree(tid)
        else:
            partial_anc.add(ancestor(tid, counts.level))
    partial_sum = 0
    for tid in coverage.partial:
        if level(tid) <= counts.level:
            partial_sum += counts.subtree(tid)
        else:
            partial_anc.add(ancestor(tid, counts.level))
    partial_sum += sum(counts.subtree(t) for t in partial_anc)
    return lo, lo + partial_fraction * partial_sum, lo + partial_sum
