"""Spatial sky-catalog engine.

Modules
-------
sphere   unit vectors, frames, half-spaces, convexes and regions
htm      hierarchical triangular mesh ids, point location and coverage
store    trixel-container catalog with tag/full vertical partition
query    query language, planner and execution-tree explain
engine   streaming executor, scan engine and spatial hash join
serve    HTTP query service
cli      the ``skyq`` command
"""

from .sphere import UnitVec, HalfSpace, Convex, Region, cap, latitude_band
from .store import Catalog, Chunk, SkyObject, sample, stats
from .query import parse, plan, explain
from .engine import EngineConfig, execute, scan_engine, hash_join_neighbors, lens_search, companion_search

__version__ = "0.1.0"

__all__ = [
    "UnitVec",
    "HalfSpace",
    "Convex",
    "Region",
    "cap",
    "latitude_band",
    "Catalog",
    "Chunk",
    "SkyObject",
    "sample",
    "stats",
    "parse",
    "plan",
    "explain",
    "EngineConfig",
    "execute",
    "scan_engine",
    "hash_join_neighbors",
    "lens_search",
    "companion_search",
]
