import numpy as np
import pytest

from skyq import store, synth


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def small_catalog(tmp_path_factory):
    """10^4 uniform objects at the default storage depth."""
    rng = np.random.default_rng(7)
    path = tmp_path_factory.mktemp("small") / "cat"
    cat = store.Catalog.create(path)
    cat.ingest(synth.uniform_chunk(rng, 10_000))
    return store.Catalog(path)


@pytest.fixture(scope="session")
def small_records(small_catalog):
    return small_catalog.all_records("TAG")


def points(rec):
    return np.stack([rec["cx"], rec["cy"], rec["cz"]], axis=-1)


def delay_for_offset(offset, seconds):
    """``scan_delay`` slowing only scans whose region has a half-space at ``offset``."""

    def delay(spec):
        hit = any(h.offset == offset for c in spec.region.convexes for h in c.constraints)
        return seconds if hit else 0.0

    return delay


def all_pairs(rec, radius_arcsec, a_mask=None, b_mask=None):
    """Brute-force pair oracle using chord length |a - b|.

    Without masks returns unordered pairs as (smaller id, larger id); with
    masks returns ordered pairs (a, b), a != b, a in ``a_mask``, b in ``b_mask``.
    """
    from skyq.sphere import ARCSEC

    p = points(rec)
    ids = rec["obj_id"]
    r = radius_arcsec * ARCSEC
    chord = 2 * np.sin(r / 2)
    rows_all = np.arange(len(p)) if a_mask is None else np.flatnonzero(a_mask)
    cols = np.arange(len(p)) if b_mask is None else np.flatnonzero(b_mask)
    out = set()
    for s in range(0, len(rows_all), 1000):
        rows = rows_all[s : s + 1000]
        ii, jj = np.nonzero(p[rows] @ p[cols].T > np.cos(r) - 1e-9)  # loose prefilter
        a, b = rows[ii], cols[jj]
        keep = (np.linalg.norm(p[a] - p[b], axis=1) <= chord) & (a != b)
        if a_mask is None:
            keep &= ids[a] < ids[b]
        out.update(zip(ids[a[keep]].tolist(), ids[b[keep]].tolist()))
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
