import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skyq import sphere, synth
from skyq.sphere import (
    ARCSEC,
    EQUATORIAL,
    GALACTIC,
    DomainError,
    Frame,
    HalfSpace,
    Region,
    Convex,
    angular_distance,
    as_region,
    cap,
    empty_region,
    from_lonlat,
    latitude_band,
    region_intersection,
    region_membership,
    region_union,
    to_lonlat,
    whole_sky,
)

# Hipparcos / IAU equatorial -> galactic matrix (rows give l,b axes), an
# independently published reference for the adopted rotation.
HIPPARCOS_AG = np.array(
    [
        [-0.0548755604, -0.8734370902, -0.4838350155],
        [+0.4941094279, -0.4448296300, +0.7469822445],
        [-0.8676661490, -0.1980763734, +0.4559837762],
    ]
)

lon = st.floats(-720, 720, allow_nan=False)
lat = st.floats(-90, 90, allow_nan=False)


def test_axis_cases():
    assert np.allclose(from_lonlat(0, 0), (1, 0, 0), atol=1e-15)
    assert np.allclose(from_lonlat(90, 0), (0, 1, 0), atol=1e-15)
    assert to_lonlat((0.0, 0.0, 1.0)) == (0.0, 90.0)


def test_latitude_out_of_range():
    with pytest.raises(DomainError):
        from_lonlat(10, 90.5)


def test_unitvec_normalized():
    v = sphere.UnitVec.normalized(3, 4, 12)
    assert abs(v.x**2 + v.y**2 + v.z**2 - 1) <= 1e-12
    with pytest.raises(DomainError):
        sphere.UnitVec.normalized(0, 0, 0)


def test_galactic_centre_round_trip():
    p = from_lonlat(266.40500, -28.93617)
    l, b = to_lonlat(p, GALACTIC)
    l = (l + 180) % 360 - 180
    assert abs(l) * 3600 < 1 and abs(b) * 3600 < 1


def test_galactic_matrix_matches_reference():
    # frame -> base rotation is the transpose of the equatorial -> galactic matrix
    assert np.allclose(GALACTIC.rotation, HIPPARCOS_AG.T, atol=1e-9)


def test_equinox_in_galactic_is_inverse_rotation():
    l, b = to_lonlat(np.array([1.0, 0.0, 0.0]), GALACTIC)
    g = HIPPARCOS_AG @ np.array([1.0, 0.0, 0.0])
    assert math.isclose(l, math.degrees(math.atan2(g[1], g[0])) % 360, abs_tol=1e-7)
    assert math.isclose(b, math.degrees(math.asin(g[2])), abs_tol=1e-7)


def test_frame_orthonormal_and_validation():
    r = GALACTIC.rotation
    assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(r) - 1) < 1e-12
    assert np.array_equal(EQUATORIAL.rotation, np.eye(3))
    with pytest.raises(DomainError):
        Frame("BAD", np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(DomainError):
        Frame("BAD", np.eye(3) * 2)


def test_load_frames(tmp_path):
    # supergalactic pole and origin in galactic coordinates, composed to equatorial
    path = tmp_path / "frames.txt"
    m = GALACTIC.rotation
    path.write_text("# name + 9 numbers\nSWAPPED " + " ".join(repr(float(x)) for x in m.ravel()) + "\n")
    frames = sphere.load_frames(path)
    assert np.allclose(frames["SWAPPED"].rotation, m)
    assert frames["SWAPPED"].kind == "CUSTOM"


def test_frame_round_trip(rng):
    p = synth.uniform_sphere(rng, 1000)
    back = GALACTIC.to_base(GALACTIC.from_base(p))
    assert np.abs(back - p).max() <= 1e-12


def test_lonlat_round_trip(rng):
    lo = rng.uniform(0, 360, 10_000)
    la = np.degrees(np.arcsin(rng.uniform(-1, 1, 10_000)))
    l2, b2 = to_lonlat(from_lonlat(lo, la))
    dl = (l2 - lo + 180) % 360 - 180
    assert np.abs(dl[np.abs(la) < 89.9]).max() < 1e-9
    assert np.abs(b2 - la).max() < 1e-9


def test_angular_distance_examples():
    assert angular_distance((1, 0, 0), (1, 0, 0)) == 0
    assert math.isclose(angular_distance((1, 0, 0), (0, 1, 0)), math.pi / 2)
    s = 1 / math.sqrt(2)
    assert math.isclose(angular_distance((1, 0, 0), (s, s, 0)), math.pi / 4)


def test_triangle_inequality(rng):
    a, b, c = (synth.uniform_sphere(rng, 10_000) for _ in range(3))
    assert np.all(angular_distance(a, c) <= angular_distance(a, b) + angular_distance(b, c) + 1e-9)


def test_cap_examples():
    c = from_lonlat(10, 20)
    assert cap(c, 0).offset == 1.0
    assert cap(c, 180 * 3600).offset == pytest.approx(-1.0, abs=1e-15)
    assert cap(c, 10).offset == pytest.approx(1 - 1.1753e-9, abs=1e-13)
    with pytest.raises(DomainError):
        cap(c, -1)


@settings(max_examples=50, deadline=None)
@given(lon, lat, st.floats(1, 180 * 3600))
def test_cap_membership_matches_distance(lo, la, radius):
    rng = np.random.default_rng(0)
    c = np.asarray(from_lonlat(lo, la))
    h = cap(c, radius)
    p = synth.uniform_sphere(rng, 500)
    dot = p @ c
    inside = h.contains(p)
    within = angular_distance(p, c) <= radius * ARCSEC
    # agreement away from the boundary (1e-12 on the dot product)
    clear = np.abs(dot - h.offset) > 1e-12
    assert np.array_equal(inside[clear], within[clear])


def test_halfspace_validation():
    with pytest.raises(DomainError):
        HalfSpace((0, 0, 1), 1.5)
    with pytest.raises(DomainError):
        HalfSpace((0, 0, 0), 0.0)
    h = HalfSpace((0, 0, 2), 0.5)
    assert math.isclose(np.linalg.norm(h.normal), 1.0)
    comp = h.complement()
    assert np.allclose(comp.normal, -np.asarray(h.normal)) and comp.offset == -0.5


def test_latitude_band_examples():
    band = latitude_band(EQUATORIAL, -90, 90)
    assert [h.offset for h in band.constraints] == pytest.approx([-1, -1])
    north = as_region(latitude_band(EQUATORIAL, 0, 90))
    assert region_membership(north, (0, 0, 1)) and not region_membership(north, (0, 0, -1))
    with pytest.raises(DomainError):
        latitude_band(EQUATORIAL, 10, 0)


def test_two_frame_band_matches_double_predicate(rng):
    p = synth.uniform_sphere(rng, 10_000)
    r = region_intersection(
        as_region(latitude_band(EQUATORIAL, -1.25, 1.25)), as_region(latitude_band(GALACTIC, 40, 90))
    )
    r2 = as_region(latitude_band(EQUATORIAL, -20, 20)) & as_region(latitude_band(GALACTIC, 30, 90))
    _, dec = to_lonlat(p)
    _, b = to_lonlat(p, GALACTIC)
    assert np.array_equal(r.contains(p), (np.abs(dec) <= 1.25) & (b >= 40))
    assert np.array_equal(r2.contains(p), (np.abs(dec) <= 20) & (b >= 30))


def test_region_identities(rng):
    p = synth.uniform_sphere(rng, 10_000)
    r = as_region(cap(from_lonlat(30, 40), 20 * 3600)) | as_region(latitude_band(GALACTIC, -5, 5))
    assert not empty_region().contains(p).any()
    assert whole_sky().contains(p).all()
    assert np.array_equal(region_union(r, empty_region()).contains(p), r.contains(p))
    assert np.array_equal(region_intersection(r, whole_sky()).contains(p), r.contains(p))
    c = from_lonlat(100, -30)
    small = as_region(cap(c, 3600))
    assert region_membership(small, c) and not region_membership(small, -np.asarray(c))


def _random_region(rng, depth=2):
    if depth == 0 or rng.random() < 0.4:
        k = rng.integers(1, 4)
        hs = [HalfSpace(synth.uniform_sphere(rng, 1)[0], rng.uniform(-0.9, 0.9)) for _ in range(k)]
        return Region((Convex(tuple(hs)),))
    a, b = _random_region(rng, depth - 1), _random_region(rng, depth - 1)
    return a | b if rng.random() < 0.5 else a & b


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_region_algebra_pointwise(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_region(rng), _random_region(rng)
    p = synth.uniform_sphere(rng, 2000)
    ma, mb = a.contains(p), b.contains(p)
    assert np.array_equal((a | b).contains(p), ma | mb)
    assert np.array_equal((a & b).contains(p), ma & mb)


def test_overlapping_caps_intersection(rng):
    p = synth.uniform_sphere(rng, 10_000)
    a = as_region(cap(from_lonlat(0, 0), 30 * 3600))
    b = as_region(cap(from_lonlat(20, 10), 30 * 3600))
    assert np.array_equal((a & b).contains(p), a.contains(p) & b.contains(p))


def test_supergalactic_frames_file():
    import pathlib

    from skyq.sphere import load_frames

    path = pathlib.Path(__file__).parent.parent / "demos" / "frames_supergalactic.txt"
    sg = load_frames(path)["SUPERGALACTIC"]
    # published J2000 positions: pole (283.8, +15.7), zero point (42.3, +59.5)
    lon, lat = to_lonlat(sg.pole)
    assert abs(lon - 283.8) < 0.1 and abs(lat - 15.7) < 0.1
    lon, lat = to_lonlat(sg.rotation[:, 0])
    assert abs(lon - 42.3) < 0.1 and abs(lat - 59.5) < 0.1
