"""Rows stream out of the HTTP service before the query finishes.

Starts a server on a free port with an artificial per-container delay on
one branch of a UNION, posts the query, and reports when the first row
and the last row arrived.

    python demos/streaming_service.py
"""

import http.client
import tempfile
import threading
import time

import numpy as np

from skyq import store, synth
from skyq.serve import ServerConfig, make_server


def slow_polar_cap(spec):
    hit = any(h.offset == 0.9 for c in spec.region.convexes for h in c.constraints)
    return 0.01 if hit else 0.0


def main():
    with tempfile.TemporaryDirectory() as d:
        cat = store.Catalog.create(f"{d}/sky")
        cat.ingest(synth.uniform_chunk(np.random.default_rng(5), 50_000))
        srv = make_server(ServerConfig(catalog=f"{d}/sky", port=0, scan_delay=slow_polar_cap))
        threading.Thread(target=srv.serve_forever, daemon=True).start()
        host, port = srv.server_address[:2]

        text = (
            "SELECT obj_id, ra, dec, r FROM sky WHERE CIRCLE(185, 2, 3600) "
            "UNION SELECT obj_id, ra, dec, r FROM sky WHERE HALFSPACE(0, 0, 1, 0.9)"
        )
        conn = http.client.HTTPConnection(host, port)
        t0 = time.perf_counter()
        conn.request("POST", "/query", body=text.encode())
        resp = conn.getresponse()
        first = None
        rows = 0
        while True:
            line = resp.readline()
            if not line:
                break
            if first is None and rows == 1:
                first = time.perf_counter() - t0
            rows += 1
        total = time.perf_counter() - t0
        print(f"status {resp.status}, {rows - 1} rows")
        print(f"first row after {first * 1000:.0f} ms, last row after {total * 1000:.0f} ms")
        srv.shutdown()
        srv.server_close()


if __name__ == "__main__":
    main()
