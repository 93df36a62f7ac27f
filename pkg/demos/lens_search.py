"""Pairwise searches: lens candidates and quasar companions.

Plants ten pairs with identical colors but different brightness among
50 000 random objects, then recovers them with the spatial hash join.
A second search looks for quasars brighter than r = 22 with a faint blue
galaxy within 5 arcsec; five such systems are planted too.

    python demos/lens_search.py
"""

import tempfile

import numpy as np

from skyq import engine, store, synth
from skyq.engine import EngineConfig


def main():
    rng = np.random.default_rng(3)
    n, k = 50_000, 10
    pos = synth.uniform_sphere(rng, n)
    twins, _ = synth.planted_pairs(rng, pos[:k], 10.0)
    hosts = np.arange(k, k + 5)
    galaxies, _ = synth.planted_pairs(rng, pos[hosts], 5.0)
    chunk = synth.uniform_chunk(rng, n + k + 5, pos=np.concatenate([pos, twins, galaxies]))
    rec = chunk.objects
    shift = rng.uniform(-2, 2, k)
    for band in "ugriz":
        rec[band][n : n + k] = rec[band][:k] + shift
    rec["class"][hosts] = store.CLASS_CODE["QSO"]
    rec["r"][hosts] = 21.0
    g = slice(n + k, n + k + 5)
    rec["class"][g] = store.CLASS_CODE["GALAXY"]
    rec["g"][g], rec["r"][g] = 21.5, 21.3

    with tempfile.TemporaryDirectory() as d:
        cat = store.Catalog.create(f"{d}/sky")
        cat.ingest(chunk)
        cfg = EngineConfig(workers=2)

        ex = engine.lens_search(cat, radius_arcsec=10.0, color_eps_mag=0.05, config=cfg)
        pairs = np.sort(ex.to_array(), order=["obj_a", "obj_b"])
        print(f"lens candidates ({len(pairs)} found, {k} planted):")
        for p in pairs:
            print(f"  {p['obj_a']:>6} {p['obj_b']:>6}  sep={p['sep_arcsec']:.2f}\"  "
                  f"max color diff={np.abs([p['d_ug'], p['d_gr'], p['d_ri'], p['d_iz']]).max():.1e}")
        print("metrics:", ex.metrics.as_dict())

        comp = engine.companion_search(cat, radius_arcsec=5.0, config=cfg).to_array()
        print(f"\nquasars with a faint blue galaxy within 5\" ({len(comp)} found, 5 planted):")
        for p in np.sort(comp, order=["obj_a", "obj_b"]):
            print(f"  QSO {p['obj_a']:>6}  galaxy {p['obj_b']:>6}  sep={p['sep_arcsec']:.2f}\"")


if __name__ == "__main__":
    main()
