"""Synthetic catalogs for tests, demos and acceptance runs."""

from __future__ import annotations

import numpy as np

from .sphere import ARCSEC, normalize
from .store import CLASSES, Chunk

__all__ = [
    "uniform_sphere",
    "random_mags",
    "uniform_chunk",
    "clustered_positions",
    "offset_point",
    "planted_pairs",
]


def uniform_sphere(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` unit vectors uniform on the sphere."""
    v = rng.normal(size=(n, 3))
    return normalize(v)


def random_mags(rng: np.random.Generator, n: int) -> np.ndarray:
    """Plausible u, g, r, i, z magnitudes: a base brightness plus colors."""
    r = rng.uniform(14.0, 24.0, n)
    gr = rng.normal(0.6, 0.4, n)
    ug = rng.normal(1.2, 0.5, n)
    ri = rng.normal(0.3, 0.2, n)
    iz = rng.normal(0.2, 0.2, n)
    g = r + gr
    return np.stack([g + ug, g, r, r - ri, r - ri - iz], axis=-1)


def uniform_chunk(
    rng: np.random.Generator,
    n: int,
    first_id: int = 1,
    schema=(),
    pos: np.ndarray | None = None,
    source: str = "<synthetic>",
) -> Chunk:
    """A chunk of ``n`` objects, uniform on the sky unless ``pos`` is given."""
    if pos is None:
        pos = uniform_sphere(rng, n)
    ids = np.arange(first_id, first_id + n, dtype=np.uint64)
    extras = rng.normal(size=(n, len(schema))) if schema else None
    return Chunk.from_arrays(
        obj_id=ids,
        pos=pos,
        mags=random_mags(rng, n),
        size=rng.exponential(2.0, n),
        obj_class=rng.integers(0, len(CLASSES), n),
        extras=extras,
        schema=tuple(schema),
        source=source,
    )


def offset_point(p: np.ndarray, sep_arcsec: float, angle: float) -> np.ndarray:
    """Point at angular distance ``sep_arcsec`` from ``p`` along position angle ``angle``."""
    p = np.asarray(p, dtype=float)
    helper = np.array([0.0, 0.0, 1.0]) if abs(p[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, p)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(p, e1)
    t = sep_arcsec * ARCSEC
    d = np.cos(angle) * e1 + np.sin(angle) * e2
    return normalize(np.cos(t) * p + np.sin(t) * d)


def clustered_positions(
    rng: np.random.Generator, n: int, clusters: int, scale_arcsec: float
) -> np.ndarray:
    """``n`` points scattered around ``clusters`` random centres (Gaussian offsets)."""
    centres = uniform_sphere(rng, clusters)
    which = rng.integers(0, clusters, n)
    sep = np.abs(rng.normal(0.0, scale_arcsec, n))
    ang = rng.uniform(0, 2 * np.pi, n)
    return np.array([offset_point(centres[w], s, a) for w, s, a in zip(which, sep, ang)])


def planted_pairs(
    rng: np.random.Generator, centres: np.ndarray, max_sep_arcsec: float
) -> tuple[np.ndarray, np.ndarray]:
    """A companion position for each centre, within ``max_sep_arcsec``; returns (pos, sep)."""
    sep = rng.uniform(0.2, 0.9, len(centres)) * max_sep_arcsec
    ang = rng.uniform(0, 2 * np.pi, len(centres))
    pos = np.array([offset_point(c, s, a) for c, s, a in zip(centres, sep, ang)])
    return pos.reshape(-1, 3), sep
