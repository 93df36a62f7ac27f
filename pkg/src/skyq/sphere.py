"""Spherical geometry on the unit sphere.

Positions are stored as Cartesian unit vectors.  Every spatial query is
expressed as a :class:`Region`: a union of :class:`Convex` patches, each of
which is an intersection of closed half-spaces ``n . p >= d``.  Caps and
latitude bands are the two common constructors.

Most functions accept either a single 3-vector or an ``(n, 3)`` array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

ARCSEC = math.pi / (180.0 * 3600.0)

# J2000 north galactic pole and the galactic longitude of the north
# celestial pole.
NGP_RA_DEG = 192.85948
NGP_DEC_DEG = 27.12825
NCP_GAL_LON_DEG = 122.93192


class DomainError(ValueError):
    """An argument is outside the domain of an operation."""


class UnitVec(NamedTuple):
    x: float
    y: float
    z: float

    @classmethod
    def normalized(cls, x: float, y: float, z: float) -> "UnitVec":
        n = math.sqrt(x * x + y * y + z * z)
        if n == 0.0:
            raise DomainError("cannot normalize the zero vector")
        return cls(x / n, y / n, z / n)

    @classmethod
    def from_array(cls, a) -> "UnitVec":
        a = np.asarray(a, dtype=float)
        return cls.normalized(float(a[0]), float(a[1]), float(a[2]))

    def antipode(self) -> "UnitVec":
        return UnitVec(-self.x, -self.y, -self.z)


def normalize(v) -> np.ndarray:
    """Normalize a vector or each row of an ``(n, 3)`` array."""
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Frames


def _galactic_rotation() -> np.ndarray:
    ra, dec = math.radians(NGP_RA_DEG), math.radians(NGP_DEC_DEG)
    theta = math.radians(NCP_GAL_LON_DEG)
    zg = np.array([math.cos(dec) * math.cos(ra), math.cos(dec) * math.sin(ra), math.sin(dec)])
    ncp = np.array([0.0, 0.0, 1.0])
    n = normalize(ncp - ncp.dot(zg) * zg)
    m = np.cross(zg, n)
    xg = math.cos(theta) * n - math.sin(theta) * m
    yg = math.sin(theta) * n + math.cos(theta) * m
    # re-orthonormalize so R^T R = I to machine precision
    xg = normalize(xg)
    yg = normalize(np.cross(zg, xg))
    return np.column_stack([xg, yg, zg])


@dataclass(frozen=True, eq=False)
class Frame:
    """A celestial coordinate frame.

    ``rotation`` maps Cartesian coordinates expressed in this frame to the
    base (equatorial) frame; its transpose maps base to frame.
    """

    name: str
    rotation: np.ndarray = field(repr=False)

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-12:
            raise DomainError(f"frame {self.name!r}: rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-12:
            raise DomainError(f"frame {self.name!r}: rotation has det != +1")
        r.setflags(write=False)
        object.__setattr__(self, "rotation", r)

    @property
    def kind(self) -> str:
        if self.name in ("EQUATORIAL", "GALACTIC"):
            return self.name
        return "CUSTOM"

    @property
    def pole(self) -> np.ndarray:
        """The frame's +z axis expressed in the base frame."""
        return self.rotation[:, 2].copy()

    def to_base(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation.T

    def from_base(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.rotation


EQUATORIAL = Frame("EQUATORIAL", np.eye(3))
GALACTIC = Frame("GALACTIC", _galactic_rotation())

FRAMES: dict[str, Frame] = {"EQUATORIAL": EQUATORIAL, "GALACTIC": GALACTIC}


def load_frames(path) -> dict[str, Frame]:
    """Read frame definitions from a text file.

    One frame per line: a name followed by the nine rotation-matrix entries
    in row-major order.  Blank lines and ``#`` comments are ignored.
    """
    frames = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 10:
            raise DomainError(f"{path}:{lineno}: expected name and 9 numbers")
        try:
            values = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise DomainError(f"{path}:{lineno}: {exc}") from None
        frames[parts[0].upper()] = Frame(parts[0].upper(), np.array(values).reshape(3, 3))
    return frames


def register_frames(frames: dict[str, Frame]) -> None:
    FRAMES.update(frames)


def get_frame(name: str) -> Frame:
    try:
        return FRAMES[name.upper()]
    except KeyError:
        raise DomainError(f"unknown frame {name!r}") from None


# --------------------------------------------------------------------------
# Coordinates


def from_lonlat(lon_deg, lat_deg, frame: Frame = EQUATORIAL):
    """Convert longitude/latitude in ``frame`` to base-frame unit vectors.

    Scalars give a :class:`UnitVec`, arrays an ``(n, 3)`` array.
    """
    scalar = np.ndim(lon_deg) == 0 and np.ndim(lat_deg) == 0
    lon = np.radians(np.mod(np.asarray(lon_deg, dtype=float), 360.0))
    lat_deg = np.asarray(lat_deg, dtype=float)
    if np.any(np.abs(lat_deg) > 90.0) or np.any(np.isnan(lat_deg)):
        raise DomainError("latitude must be within [-90, 90] degrees")
    lat = np.radians(lat_deg)
    cl = np.cos(lat)
    v = np.stack([cl * np.cos(lon), cl * np.sin(lon), np.sin(lat)], axis=-1)
    if frame is not EQUATORIAL:
        v = frame.to_base(v)
    v = normalize(v)
    if scalar:
        return UnitVec(*map(float, v))
    return v


def to_lonlat(v, frame: Frame = EQUATORIAL):
    """Inverse of :func:`from_lonlat`.

    Longitude is in ``[0, 360)``, latitude in ``[-90, 90]``; at the poles the
    longitude is reported as 0.
    """
    a = np.asarray(v, dtype=float)
    if frame is not EQUATORIAL:
        a = frame.from_base(a)
    x, y, z = a[..., 0], a[..., 1], a[..., 2]
    rho = np.hypot(x, y)
    lon = np.degrees(np.arctan2(y, x))
    lon = np.where(rho == 0.0, 0.0, lon)
    lon = np.where(lon < 0.0, lon + 360.0, lon)
    lon = np.where(lon >= 360.0, 0.0, lon)
    lat = np.degrees(np.arctan2(z, rho))
    if a.ndim == 1:
        return float(lon), float(lat)
    return lon, lat


def angular_distance(a, b):
    """Angle between unit vectors in radians, ``atan2(|a x b|, a . b)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.linalg.norm(np.cross(a, b), axis=-1)
    d = np.sum(a * b, axis=-1)
    out = np.arctan2(c, d)
    if np.ndim(out) == 0:
        return float(out)
    return out


# --------------------------------------------------------------------------
# Half-space algebra


@dataclass(frozen=True, eq=False)
class HalfSpace:
    """The closed set ``{p : normal . p >= offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        if not np.all(np.isfinite(n)) or not np.any(n):
            raise DomainError("half-space normal must be a finite non-zero vector")
        n = normalize(n)
        n.setflags(write=False)
        object.__setattr__(self, "normal", n)
        d = float(self.offset)
        if not -1.0 <= d <= 1.0:
            raise DomainError(f"half-space offset {d} outside [-1, 1]")
        object.__setattr__(self, "offset", d)

    def contains(self, p):
        return np.asarray(p, dtype=float) @ self.normal >= self.offset

    def complement(self) -> "HalfSpace":
        return HalfSpace(-self.normal, -self.offset)

    def __eq__(self, other):
        return (
            isinstance(other, HalfSpace)
            and self.offset == other.offset
            and bool(np.array_equal(self.normal, other.normal))
        )

    def __hash__(self):
        return hash((tuple(self.normal), self.offset))

    def __repr__(self):
        n = ", ".join(f"{c:.6g}" for c in self.normal)
        return f"HalfSpace(({n}), {self.offset:.9g})"


@dataclass(frozen=True)
class Convex:
    """Conjunction of half-spaces; no constraints means the whole sky."""

    constraints: tuple[HalfSpace, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def contains(self, p):
        p = np.asarray(p, dtype=float)
        mask = np.ones(p.shape[:-1], dtype=bool)
        for h in self.constraints:
            mask &= h.contains(p)
        return mask


@dataclass(frozen=True)
class Region:
    """Disjunction of convexes; no convexes means the empty region."""

    convexes: tuple[Convex, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "convexes", tuple(self.convexes))

    def contains(self, p):
        p = np.asarray(p, dtype=float)
        mask = np.zeros(p.shape[:-1], dtype=bool)
        for c in self.convexes:
            mask |= c.contains(p)
        return mask

    @property
    def is_empty(self) -> bool:
        return not self.convexes

    @property
    def is_whole_sky(self) -> bool:
        return any(not c.constraints for c in self.convexes)

    def __or__(self, other):
        return region_union(self, other)

    def __and__(self, other):
        return region_intersection(self, other)


def whole_sky() -> Region:
    return Region((Convex(()),))


def empty_region() -> Region:
    return Region(())


def as_region(obj) -> Region:
    """Promote a HalfSpace, Convex or Region to a Region."""
    if isinstance(obj, Region):
        return obj
    if isinstance(obj, Convex):
        return Region((obj,))
    if isinstance(obj, HalfSpace):
        return Region((Convex((obj,)),))
    raise TypeError(f"cannot make a region from {type(obj).__name__}")


def cap(center, radius_arcsec: float) -> HalfSpace:
    """Half-space selecting points within ``radius_arcsec`` of ``center``."""
    if radius_arcsec < 0:
        raise DomainError("cap radius must be non-negative")
    if radius_arcsec > 180.0 * 3600.0:
        raise DomainError("cap radius must not exceed 180 degrees")
    return HalfSpace(center, math.cos(radius_arcsec * ARCSEC))


def latitude_band(frame: Frame, lat_min_deg: float, lat_max_deg: float) -> Convex:
    """Convex selecting ``lat_min <= latitude <= lat_max`` in ``frame``."""
    if not -90.0 <= lat_min_deg <= lat_max_deg <= 90.0:
        raise DomainError(
            f"latitude band [{lat_min_deg}, {lat_max_deg}] is not within [-90, 90] "
            "with lo <= hi"
        )
    pole = frame.pole
    return Convex(
        (
            HalfSpace(pole, math.sin(math.radians(lat_min_deg))),
            HalfSpace(-pole, -math.sin(math.radians(lat_max_deg))),
        )
    )


def region_membership(region, p) -> bool:
    """Exact membership of a single point (or a boolean array for many)."""
    out = as_region(region).contains(p)
    if np.ndim(out) == 0:
        return bool(out)
    return out


def region_union(a: Region, b: Region) -> Region:
    return Region(as_region(a).convexes + as_region(b).convexes)


def region_intersection(a: Region, b: Region) -> Region:
    a, b = as_region(a), as_region(b)
    return Region(
        tuple(Convex(ca.constraints + cb.constraints) for ca in a.convexes for cb in b.convexes)
    )


def region_from_convexes(convexes: Iterable[Sequence[HalfSpace]]) -> Region:
    return Region(tuple(Convex(tuple(c)) for c in convexes))
