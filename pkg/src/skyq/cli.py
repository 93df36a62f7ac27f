"""``skyq`` command line: ingest, query, join, sample, stats and serve.

Exit codes: 0 success, 2 user error (bad input, query or configuration),
3 conflict (duplicate object ids), 4 I/O or integrity failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass

from . import engine, formats, query, store
from .sphere import DomainError, load_frames, register_frames

EXIT_OK, EXIT_USER, EXIT_CONFLICT, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("skyq")


@dataclass(frozen=True)
class CliConfig:
    catalog: str | None
    workers: int = 1
    format: str = "csv"
    verbosity: int = 0

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.format not in formats.FORMATS:
            raise ValueError(f"format must be one of {formats.FORMATS}")


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--catalog", metavar="PATH", default=d, help="catalog directory (env SKYQ_CATALOG)")
    p.add_argument("--workers", type=_positive_int, default=d if suppress else 1)
    p.add_argument("--format", choices=formats.FORMATS, default=d if suppress else "csv")
    p.add_argument("-v", "--verbose", action="count", default=d if suppress else 0)
    p.add_argument("--frames", metavar="PATH", default=d, help="extra coordinate frames file")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skyq", description="Spatial sky-catalog engine.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="load CSV chunks")
    _global_flags(s, suppress=True)
    s.add_argument("csv", nargs="+")
    s.add_argument("--storage-depth", type=int, default=store.DEFAULT_STORAGE_DEPTH)

    s = sub.add_parser("query", help="run a query")
    _global_flags(s, suppress=True)
    s.add_argument("text", help="query text, or @file to read it from a file")
    s.add_argument("--explain", action="store_true", help="print the plan instead of running it")
    s.add_argument("--metrics", action="store_true", help="metrics trailer on stderr")
    s.add_argument("--no-index", action="store_true", help="whole-sky scan with the full predicate")
    s.add_argument("--sorted", action="store_true", help="buffer and sort rows by obj_id")
    s.add_argument("--dump-ast", action="store_true")
    s.add_argument("--level", type=int, default=None, help="coverage classification level")

    s = sub.add_parser("join", help="pairwise neighbour searches")
    _global_flags(s, suppress=True)
    s.add_argument("kind", choices=("lens", "companion", "neighbors"))
    s.add_argument("--radius", type=float, default=None, help="arcsec (lens 10, companion 5)")
    s.add_argument("--color-eps", type=float, default=0.05)
    s.add_argument("--primary", default=None, help="primary condition (companion)")
    s.add_argument("--companion", default=None, help="companion condition (companion)")
    s.add_argument("--faint-g", type=float, default=20.0)
    s.add_argument("--blue-gr", type=float, default=0.4)
    s.add_argument("--bucket-level", type=int, default=None)
    s.add_argument("--sorted", action="store_true")
    s.add_argument("--metrics", action="store_true")

    s = sub.add_parser("sample", help="write a deterministic hash sample")
    _global_flags(s, suppress=True)
    s.add_argument("--fraction", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, metavar="PATH")

    s = sub.add_parser("stats", help="catalog statistics")
    _global_flags(s, suppress=True)

    s = sub.add_parser("serve", help="HTTP query service")
    _global_flags(s, suppress=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8765)
    s.add_argument("--max-concurrent", type=_positive_int, default=4)
    s.add_argument("--row-limit", type=_positive_int, default=1_000_000)
    return p


def _config(args) -> CliConfig:
    return CliConfig(
        catalog=args.catalog or os.environ.get("SKYQ_CATALOG"),
        workers=args.workers,
        format=args.format,
        verbosity=args.verbose,
    )


def _catalog_path(cfg: CliConfig) -> str:
    if not cfg.catalog:
        raise UsageError("no catalog given (use --catalog or SKYQ_CATALOG)")
    return cfg.catalog


def _open(cfg: CliConfig) -> store.Catalog:
    return store.Catalog(_catalog_path(cfg))


def _write_stream(ex, fmt: str, out, sort_keys=None) -> None:
    out.write(formats.header(ex.dtype, fmt))
    if sort_keys is not None:
        out.write(formats.encode(formats.sort_records(ex.to_array(), sort_keys), fmt))
        return
    for batch in ex:
        if len(batch):
            out.write(formats.encode(batch, fmt))
            out.flush()


def cmd_ingest(args, cfg: CliConfig, out) -> int:
    path = _catalog_path(cfg)
    chunks = [store.read_csv_chunk(p) for p in args.csv]
    cat = store.Catalog.open_or_create(path, chunks[0].schema, args.storage_depth)
    for chunk in chunks:
        report = cat.ingest(chunk)
        out.write(f"{report.summary()} source={chunk.source}\n")
    return EXIT_OK


def cmd_query(args, cfg: CliConfig, out) -> int:
    text = args.text
    if text.startswith("@"):
        with open(text[1:]) as fh:
            text = fh.read()
    ast = query.parse(text)
    if args.dump_ast:
        out.write(query.dump_ast(ast) + "\n")
        return EXIT_OK
    cat = _open(cfg)
    plan = query.plan(ast, cat.meta, args.level, use_index=not args.no_index)
    if args.explain:
        out.write(query.explain(plan) + "\n")
        return EXIT_OK
    ex = engine.execute(plan, cat, engine.EngineConfig(workers=cfg.workers))
    try:
        _write_stream(ex, cfg.format, out, ("obj_id",) if args.sorted else None)
    finally:
        ex.close()
    if args.metrics:
        sys.stderr.write(ex.metrics.trailer() + "\n")
    return EXIT_OK


def cmd_join(args, cfg: CliConfig, out) -> int:
    cat = _open(cfg)
    ecfg = engine.EngineConfig(workers=cfg.workers, bucket_level=args.bucket_level)
    if args.kind == "lens":
        radius = 10.0 if args.radius is None else args.radius
        ex = engine.lens_search(cat, radius, args.color_eps, ecfg)
    elif args.kind == "companion":
        radius = 5.0 if args.radius is None else args.radius
        ex = engine.companion_search(
            cat, args.primary, args.companion, radius, ecfg, args.faint_g, args.blue_gr
        )
    else:
        radius = 10.0 if args.radius is None else args.radius
        ex = engine.hash_join_neighbors(cat, radius, None, ecfg)
    try:
        _write_stream(ex, cfg.format, out, ("obj_a", "obj_b") if args.sorted else None)
    finally:
        ex.close()
    if args.metrics:
        sys.stderr.write(ex.metrics.trailer() + "\n")
    return EXIT_OK


def cmd_sample(args, cfg: CliConfig, out) -> int:
    cat = _open(cfg)
    derived = store.sample(cat, args.fraction, args.seed, args.out)
    out.write(f"objects={derived.total} source_objects={cat.total} path={args.out}\n")
    return EXIT_OK


def cmd_stats(args, cfg: CliConfig, out) -> int:
    s = store.stats(_open(cfg))
    out.write("\n".join(s.lines()) + "\n")
    return EXIT_OK


def cmd_serve(args, cfg: CliConfig, out) -> int:
    from .serve import ServerConfig, serve

    serve(
        ServerConfig(
            catalog=_catalog_path(cfg),
            host=args.host,
            port=args.port,
            workers=cfg.workers,
            max_concurrent=args.max_concurrent,
            row_limit=args.row_limit,
        )
    )
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "query": cmd_query,
    "join": cmd_join,
    "sample": cmd_sample,
    "stats": cmd_stats,
    "serve": cmd_serve,
}


def exit_code(exc: BaseException) -> int:
    """Map an exception to the stable exit status."""
    if isinstance(exc, store.DuplicateIdError):
        return EXIT_CONFLICT
    if isinstance(exc, store.ChunkFormatError):
        return EXIT_USER
    if isinstance(exc, (store.StoreError, OSError)):
        return EXIT_IO
    if isinstance(exc, (query.QueryError, DomainError, engine.ConfigError, UsageError, ValueError)):
        return EXIT_USER
    return EXIT_IO


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.frames:
            register_frames(load_frames(args.frames))
        return COMMANDS[args.command](args, cfg, out)
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head); not an error
        try:
            sys.stdout = open(os.devnull, "w")
        except OSError:
            pass
        return EXIT_OK
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001 - reported with a stable exit code
        code = exit_code(exc)
        sys.stderr.write(f"skyq: error: {exc}\n")
        if code == EXIT_IO and not isinstance(exc, (store.StoreError, OSError)):
            log.debug("internal error", exc_info=True)
        return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
