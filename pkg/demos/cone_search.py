"""Cone search with and without the spatial index.

Builds a 200 000-object synthetic catalog, prints the plan for a 2-degree
cone around (185, +2), then runs it indexed and as a whole-sky scan and
compares result sets and bytes read.

    python demos/cone_search.py
"""

import tempfile
import time

import numpy as np

from skyq import engine, query, store, synth


def run(cat, text, use_index):
    plan = query.compile_query(text, cat.meta, use_index=use_index)
    t0 = time.perf_counter()
    ex = engine.execute(plan, cat)
    rows = ex.to_array()
    return rows, ex.metrics, time.perf_counter() - t0


def main():
    with tempfile.TemporaryDirectory() as d:
        cat = store.Catalog.create(f"{d}/sky")
        report = cat.ingest(synth.uniform_chunk(np.random.default_rng(1), 200_000))
        print("loaded:", report.summary())

        text = "SELECT TAG FROM sky WHERE CIRCLE(185.0, 2.0, 7200) AND r < 22"
        print("\nplan:")
        print(query.explain(query.compile_query(text, cat.meta)))

        fast, m_fast, t_fast = run(cat, text, use_index=True)
        slow, m_slow, t_slow = run(cat, text, use_index=False)
        same = set(fast["obj_id"].tolist()) == set(slow["obj_id"].tolist())
        print(f"\nindexed : {len(fast)} rows, {m_fast.containers_opened} containers, "
              f"{m_fast.io.bytes_read} bytes, {t_fast * 1000:.1f} ms")
        print(f"no index: {len(slow)} rows, {m_slow.containers_opened} containers, "
              f"{m_slow.io.bytes_read} bytes, {t_slow * 1000:.1f} ms")
        print("same result set:", same)


if __name__ == "__main__":
    main()
