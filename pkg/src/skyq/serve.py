"""Minimal HTTP/1.1 query service.

Endpoints
---------
POST /query   query text in the body; rows stream back with chunked transfer
              encoding as csv (default) or jsonl (``Accept: application/x-ndjson``)
GET  /stats   catalog statistics, one JSON object per line
GET  /healthz 200 while the catalog opens

Each request runs its own execution pipeline against the catalog version
current when it arrived.  Requests beyond ``max_concurrent`` get 429.
"""

from __future__ import annotations

import json
import logging
import threading
from collections import deque
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable

from . import engine, formats, query, store

log = logging.getLogger("skyq.serve")

TRUNCATED = "#truncated\n"


@dataclass(frozen=True)
class ServerConfig:
    catalog: str
    host: str = "127.0.0.1"
    port: int = 8765
    workers: int = 1
    max_concurrent: int = 4
    row_limit: int = 1_000_000
    max_body: int = 1 << 20
    scan_delay: Callable | None = None  # test instrumentation, see EngineConfig

    def __post_init__(self):
        for name in ("workers", "max_concurrent", "row_limit"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def engine_config(self) -> engine.EngineConfig:
        return engine.EngineConfig(workers=self.workers, scan_delay=self.scan_delay)


class _ClientGone(Exception):
    pass


class SkyqServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, config: ServerConfig):
        self.config = config
        self.slots = threading.BoundedSemaphore(config.max_concurrent)
        self.recent: deque = deque(maxlen=64)  # (query text, execution) for inspection
        self.cancelled_by_client = 0
        self._lock = threading.Lock()
        super().__init__((config.host, config.port), Handler)

    def open_catalog(self) -> store.Catalog:
        return store.Catalog(self.config.catalog)


class Handler(BaseHTTPRequestHandler):
    server: SkyqServer
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.info("%s " + fmt, self.address_string(), *args)

    # -- helpers

    def _plain(self, status: int, text: str, media="text/plain; charset=utf-8") -> None:
        body = text.encode()
        self.send_response(status)
        self.send_header("Content-Type", media)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _chunk(self, text: str) -> None:
        data = text.encode()
        if not data:
            return
        try:
            self.wfile.write(b"%x\r\n%s\r\n" % (len(data), data))
            self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, ConnectionAbortedError) as exc:
            raise _ClientGone() from exc

    def _end_chunks(self) -> None:
        try:
            self.wfile.write(b"0\r\n\r\n")
            self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError, ConnectionAbortedError):
            self.close_connection = True

    def _start_stream(self, media: str) -> None:
        self.send_response(HTTPStatus.OK)
        self.send_header("Content-Type", media)
        self.send_header("Transfer-Encoding", "chunked")
        self.end_headers()

    # -- endpoints

    def do_GET(self):
        if self.path == "/healthz":
            try:
                self.server.open_catalog()
            except Exception as exc:  # noqa: BLE001
                self._plain(HTTPStatus.SERVICE_UNAVAILABLE, f"catalog unavailable: {exc}\n")
                return
            self._plain(HTTPStatus.OK, "ok\n")
        elif self.path == "/stats":
            try:
                s = store.stats(self.server.open_catalog())
            except Exception as exc:  # noqa: BLE001
                self._plain(HTTPStatus.INTERNAL_SERVER_ERROR, f"{exc}\n")
                return
            lines = [json.dumps({"total": s.total, "containers": len(s.containers)})]
            for name, (lo, hi) in s.ranges.items():
                lines.append(json.dumps({"attribute": name, "min": lo, "max": hi}))
            self._plain(HTTPStatus.OK, "\n".join(lines) + "\n", formats.MEDIA_TYPES["jsonl"])
        else:
            self._plain(HTTPStatus.NOT_FOUND, "not found\n")

    def do_POST(self):
        if self.path != "/query":
            self._plain(HTTPStatus.NOT_FOUND, "not found\n")
            return
        n = int(self.headers.get("Content-Length") or 0)
        if n > self.server.config.max_body:
            self._plain(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, "query too large\n")
            return
        text = self.rfile.read(n).decode("utf-8", errors="replace")
        self._run_query(text)

    def _run_query(self, text: str) -> None:
        fmt = "jsonl" if "application/x-ndjson" in (self.headers.get("Accept") or "") else "csv"
        try:
            cat = self.server.open_catalog()
            plan = query.plan(query.parse(text), cat.meta)
        except query.QueryError as exc:
            self._plain(HTTPStatus.BAD_REQUEST, f"{exc}\n")
            return
        except Exception as exc:  # noqa: BLE001
            self._plain(HTTPStatus.INTERNAL_SERVER_ERROR, f"{exc}\n")
            return
        if not self.server.slots.acquire(blocking=False):
            self._plain(HTTPStatus.TOO_MANY_REQUESTS, "too many concurrent queries\n")
            return
        ex = engine.execute(plan, cat, self.server.config.engine_config())
        with self.server._lock:
            self.server.recent.append((text, ex))
        held = True

        def release():
            # free the slot before the final bytes so a client that starts
            # its next query immediately does not race the bookkeeping
            nonlocal held
            ex.close()
            if held:
                held = False
                self.server.slots.release()

        limit = self.server.config.row_limit
        sent = 0
        it = iter(ex)
        try:
            try:
                first = next(it, None)
            except Exception as exc:  # noqa: BLE001
                release()
                self._plain(HTTPStatus.INTERNAL_SERVER_ERROR, f"{exc}\n")
                return
            self._start_stream(formats.MEDIA_TYPES[fmt])
            self._chunk(formats.header(ex.dtype, fmt))
            batch = first
            while batch is not None:
                if sent + len(batch) > limit:
                    self._chunk(formats.encode(batch[: limit - sent], fmt))
                    release()
                    self._chunk(TRUNCATED)
                    break
                self._chunk(formats.encode(batch, fmt))
                sent += len(batch)
                try:
                    batch = next(it, None)
                except Exception as exc:  # noqa: BLE001 - headers already sent
                    release()
                    self._chunk(f"#error: {exc}\n")
                    break
            release()
            self._end_chunks()
        except _ClientGone:
            with self.server._lock:
                self.server.cancelled_by_client += 1
            self.close_connection = True
        finally:
            release()


def make_server(config: ServerConfig) -> SkyqServer:
    """Bind a server (``port=0`` picks a free port); call ``serve_forever``."""
    store.Catalog(config.catalog)  # fail fast on an unreadable catalog
    return SkyqServer(config)


def serve(config: ServerConfig) -> None:
    srv = make_server(config)
    host, port = srv.server_address[:2]
    log.warning("skyq serving %s on http://%s:%d", config.catalog, host, port)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
