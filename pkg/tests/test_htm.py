import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skyq import htm, synth
from skyq.sphere import (
    ARCSEC,
    EQUATORIAL,
    GALACTIC,
    Convex,
    DomainError,
    HalfSpace,
    Region,
    as_region,
    cap,
    empty_region,
    from_lonlat,
    latitude_band,
    whole_sky,
)

valid_ids = st.integers(0, 7).flatmap(
    lambda b: st.lists(st.integers(0, 3), max_size=12).map(
        lambda ds: _descend(8 + b, ds)
    )
)


def _descend(t, digits):
    for d in digits:
        t = 4 * t + d
    return t


def sample_in(corners, n, rng):
    """Points strictly inside each spherical triangle: ``(m, n, 3)``."""
    w = rng.dirichlet(np.ones(3), size=(len(corners), n))
    w = np.clip(w, 1e-6, None)
    p = np.einsum("tnk,tkj->tnj", w, corners)
    return p / np.linalg.norm(p, axis=-1, keepdims=True)


def test_base_trixels():
    base = htm.base_trixels()
    assert [t.id for t in base] == list(range(8, 16))
    for t in base:
        assert np.dot(np.cross(t.v0, t.v1), t.v2) > 0
        assert math.isclose(htm.trixel_solid_angle(t), math.pi / 2, rel_tol=1e-12)
    verts = {tuple(np.round(v, 12)) for t in base for v in t.corners}
    assert len(verts) == 6


def test_base_table():
    n3 = htm.trixel(15)
    assert np.allclose(n3.corners, [(0, 1, 0), (0, 0, 1), (1, 0, 0)])
    s0 = htm.trixel(8)
    assert np.allclose(s0.corners, [(1, 0, 0), (0, 0, -1), (0, 1, 0)])


@settings(max_examples=200)
@given(valid_ids, st.integers(0, 3))
def test_id_algebra(t, i):
    c = htm.children(t)[i]
    assert c == 4 * t + i
    assert htm.parent(c) == t
    assert htm.level(c) == htm.level(t) + 1
    assert htm.is_valid(c)
    assert htm.parse_trixel(htm.trixel_name(c)) == c


def test_invalid_ids():
    for bad in (0, 1, 7, 16, 31, 2**53):
        assert not htm.is_valid(bad)
    with pytest.raises(DomainError):
        htm.level(17)


def test_trixel_name():
    assert htm.trixel_name(15) == "N3"
    assert htm.trixel_name(_descend(15, [0, 1, 2])) == "N3:012"
    assert htm.parse_trixel("N3:012") == _descend(15, [0, 1, 2])


def test_subdivide_partition_and_orientation():
    t = htm.trixel(_descend(13, [2, 1]))
    kids = htm.subdivide(t)
    assert [k.id for k in kids] == [4 * t.id + i for i in range(4)]
    for k in kids:
        assert np.dot(np.cross(k.v0, k.v1), k.v2) > 0
    total = sum(htm.trixel_solid_angle(k) for k in kids)
    assert math.isclose(total, htm.trixel_solid_angle(t), rel_tol=1e-12)
    kids_n3 = htm.subdivide(htm.trixel(15))
    assert math.isclose(sum(htm.trixel_solid_angle(k) for k in kids_n3), math.pi / 2, rel_tol=1e-12)


@pytest.mark.parametrize("lv", range(0, 7))
def test_level_counts_and_area(lv):
    ids, c = htm.trixels_at_level(lv)
    assert len(ids) == 8 * 4**lv
    assert math.isclose(htm.solid_angles(c).sum(), 4 * math.pi, rel_tol=1e-9)


def test_level7_area_ratio():
    _, c = htm.trixels_at_level(7)
    a = htm.solid_angles(c)
    ratio = a.max() / a.min()
    assert ratio <= 3.0
    assert 2.0 < ratio < 2.2


@settings(max_examples=100)
@given(valid_ids)
def test_geometry_id_consistency(t):
    direct = htm.trixel(t).corners
    via_table = htm.corners_of(np.array([t], dtype=np.uint64))[0]
    assert np.abs(direct - via_table).max() <= 1e-12


def test_locate_examples():
    s = 1 / math.sqrt(3)
    assert htm.locate((s, s, s), 0) == 15
    assert htm.locate((0.0, 0.0, 1.0), 0) == 12
    with pytest.raises(DomainError):
        htm.locate((1.0, 0.0, 0.0), 25)


def test_locate_oracle(rng):
    p = synth.uniform_sphere(rng, 10_000)
    ids = htm.locate_many(p, 6)
    c = htm.corners_of(ids)
    m = htm._edge_margin(c, p)
    assert (m >= -1e-15).all()
    # no lower-id sibling also contains the point
    for k in range(4):
        sib = (ids // np.uint64(4)) * np.uint64(4) + np.uint64(k)
        lower = sib < ids
        if lower.any():
            ms = htm._edge_margin(htm.corners_of(sib[lower]), p[lower])
            assert not (ms >= -1e-15).any()


@pytest.mark.parametrize("lv", [0, 3, 8, 14, 24])
def test_locate_consistent_across_levels(rng, lv):
    p = synth.uniform_sphere(rng, 2000)
    fine = htm.locate_many(p, lv)
    for coarse_lv in range(0, lv + 1, max(1, lv // 3)):
        coarse = htm.locate_many(p, coarse_lv)
        assert np.array_equal(fine >> np.uint64(2 * (lv - coarse_lv)), coarse)


def test_locate_vertices_and_edges_total():
    # octahedron vertices and edge midpoints lie on several trixels' borders
    pts = np.array(
        [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1), (1, 1, 0), (1, 0, 1), (0, -1, -1)],
        dtype=float,
    )
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    for lv in (0, 5, 12):
        ids = htm.locate_many(pts, lv)
        assert all(htm.is_valid(int(t)) and htm.level(int(t)) == lv for t in ids)


def test_classify_trivial():
    cov = htm.classify(whole_sky(), 5)
    assert cov.full == tuple(range(8, 16)) and cov.partial == ()
    cov = htm.classify(empty_region(), 5)
    assert cov.full == () and cov.partial == ()


def test_classify_pole_cap():
    cov = htm.classify(cap((0.0, 0.0, 1.0), 3600), 3)
    assert cov.full == ()
    assert len(cov.partial) == 4
    # the four level-3 trixels incident on the pole
    assert set(cov.partial) == {_descend(b, [1, 0, 0]) for b in (12, 13, 14, 15)}
    for t in cov.partial:
        assert np.isclose(htm.trixel(t).corners[:, 2], 1.0).any()


def _random_region(rng):
    kind = rng.integers(0, 4)
    if kind == 0:
        return as_region(cap(synth.uniform_sphere(rng, 1)[0], rng.uniform(0.1, 30) * 3600))
    if kind == 1:
        lo = rng.uniform(-90, 80)
        frame = EQUATORIAL if rng.random() < 0.5 else GALACTIC
        return as_region(latitude_band(frame, lo, min(90, lo + rng.uniform(1, 40))))
    if kind == 2:
        hs = [HalfSpace(synth.uniform_sphere(rng, 1)[0], rng.uniform(-0.5, 0.5)) for _ in range(rng.integers(1, 5))]
        return Region((Convex(tuple(hs)),))
    return _random_region(rng) | _random_region(rng)


def _rejected(cov, lv):
    ids, c = htm.trixels_at_level(lv)
    covered = np.zeros(len(ids), dtype=bool)
    covered |= np.isin(ids, np.array(cov.partial, dtype=np.uint64))
    for f in cov.full:
        lo, hi = htm.descendant_range(f, lv) if htm.level(f) <= lv else (0, 0)
        covered |= (ids >= lo) & (ids < hi)
    return c[~covered]


@pytest.mark.parametrize("seed", range(12))
def test_coverage_soundness(seed):
    rng = np.random.default_rng(seed)
    region = _random_region(rng)
    lv = int(rng.integers(3, 7))
    cov = htm.classify(region, lv)
    if cov.full:
        p = sample_in(htm.corners_of(np.array(cov.full, dtype=np.uint64)), 200, rng)
        assert region.contains(p.reshape(-1, 3)).all()
    rej = _rejected(cov, lv)
    if len(rej):
        p = sample_in(rej, 20, rng)
        assert not region.contains(p.reshape(-1, 3)).any()


@pytest.mark.parametrize("seed", range(6))
def test_coverage_completeness(seed):
    rng = np.random.default_rng(100 + seed)
    region = _random_region(rng)
    lv = int(rng.integers(2, 7))
    cov = htm.classify(region, lv)
    p = synth.uniform_sphere(rng, 10_000)
    inside = p[region.contains(p)]
    fine = htm.locate_many(inside, lv)
    ok = np.isin(fine, np.array(cov.partial, dtype=np.uint64))
    for f in cov.full:
        ok |= (fine >> np.uint64(2 * (lv - htm.level(f)))) == np.uint64(f)
    assert ok.all()


def test_coverage_structure():
    rng = np.random.default_rng(3)
    for _ in range(10):
        cov = htm.classify(_random_region(rng), 5)
        ids = list(cov.full) + list(cov.partial)
        assert len(ids) == len(set(ids))
        assert all(htm.level(t) == 5 for t in cov.partial)
        for a in cov.full:
            for b in ids:
                if a != b and htm.level(b) > htm.level(a):
                    assert htm.ancestor(b, htm.level(a)) != a


def test_hole_region_not_full():
    # everything except a small cap: the trixel holding the hole must not be FULL
    hole = cap((0.3, 0.4, np.sqrt(1 - 0.25)), 60)
    r = as_region(hole.complement())
    cov = htm.classify(r, 6)
    home = htm.locate(hole.normal, 6)
    assert all(home >> (2 * (6 - htm.level(f))) != f for f in cov.full)
    assert home in cov.partial


def test_min_inradius():
    r4 = htm.min_inradius(4) / ARCSEC
    assert 5000 < r4 < 7000
    assert htm.min_inradius(5) < htm.min_inradius(4)
    with pytest.raises(DomainError):
        htm.min_inradius(9)


def test_estimate_selectivity_examples(small_catalog, small_records):
    counts = small_catalog.meta.counts
    assert htm.estimate_selectivity(htm.Coverage((), (), 6), counts) == (0, 0, 0)
    lo, ex, hi = htm.estimate_selectivity(htm.classify(whole_sky(), 6), counts)
    assert lo == ex == hi == len(small_records)
    with pytest.raises(DomainError):
        htm.estimate_selectivity(htm.Coverage((), (), 6), None)


def test_estimate_brackets_truth(small_catalog, small_records):
    rng = np.random.default_rng(11)
    p = np.stack([small_records["cx"], small_records["cy"], small_records["cz"]], axis=-1)
    for _ in range(100):
        r = as_region(cap(synth.uniform_sphere(rng, 1)[0], rng.uniform(0.1, 30) * 3600))
        cov = htm.classify(r, small_catalog.storage_depth + 2)
        lo, _, hi = htm.estimate_selectivity(cov, small_catalog.meta.counts)
        n = int(r.contains(p).sum())
        assert lo <= n <= hi
