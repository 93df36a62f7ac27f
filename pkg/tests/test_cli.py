import csv
import io
import json

import numpy as np
import pytest

from skyq import store, synth
from skyq.sphere import to_lonlat
from skyq.cli import main

HEADER = "obj_id,ra_deg,dec_deg,u,g,r,i,z,size_arcsec,class\n"


def _run(*argv):
    out = io.StringIO()
    code = main([str(a) for a in argv], out=out)
    return code, out.getvalue()


def _write_csv(path, rows):
    path.write_text(HEADER + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


@pytest.fixture(scope="module")
def cli_catalog(tmp_path_factory):
    """CSV-ingested catalog of 3000 uniform objects."""
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(9)
    chunk = synth.uniform_chunk(rng, 3000)
    rec = chunk.objects
    lon, lat = to_lonlat(store.positions(rec))
    names = store.CLASSES
    rows = [
        (int(o["obj_id"]), repr(float(a)), repr(float(b)), *(repr(float(o[m])) for m in "ugriz"),
         repr(float(o["size"])), names[int(o["class"])])
        for o, a, b in zip(rec, lon, lat)
    ]  # fmt: skip
    src = _write_csv(d / "chunk.csv", rows)
    code, text = _run("--catalog", d / "cat", "ingest", src)
    assert code == 0, text
    return d / "cat"


def test_ingest_three_rows(tmp_path):
    src = _write_csv(
        tmp_path / "a.csv",
        [(1, 185.0, 2.0, 20, 19, 18, 17, 16, 1.0, "STAR"),
         (2, 185.1, 2.0, 20, 19, 18, 17, 16, 1.0, "QSO"),
         (3, 10.0, -40.0, 20, 19, 18, 17, 16, 1.0, "GALAXY")],
    )  # fmt: skip
    code, text = _run("--catalog", tmp_path / "c", "ingest", src)
    assert code == 0 and text.startswith("objects=3 ")
    code, text = _run("stats", "--catalog", tmp_path / "c")
    assert code == 0 and "total=3" in text


def test_ingest_bad_latitude(tmp_path, capsys):
    src = _write_csv(tmp_path / "bad.csv", [(1, 185.0, 95.0, 20, 19, 18, 17, 16, 1.0, "STAR")])
    code, _ = _run("--catalog", tmp_path / "c", "ingest", src)
    assert code == 2
    assert "bad.csv:2" in capsys.readouterr().err


def test_reload_is_conflict_and_atomic(tmp_path, capsys):
    src = _write_csv(tmp_path / "a.csv", [(1, 1.0, 1.0, 20, 19, 18, 17, 16, 1.0, "STAR")])
    assert _run("--catalog", tmp_path / "c", "ingest", src)[0] == 0
    assert _run("--catalog", tmp_path / "c", "ingest", src)[0] == 3
    assert "duplicate" in capsys.readouterr().err
    assert store.Catalog(tmp_path / "c").total == 1


def test_env_catalog_and_missing(tmp_path, monkeypatch, capsys, cli_catalog):
    monkeypatch.setenv("SKYQ_CATALOG", str(cli_catalog))
    code, text = _run("query", "SELECT COUNT FROM c")
    assert code == 0 and text.splitlines() == ["count", "3000"]
    monkeypatch.delenv("SKYQ_CATALOG")
    assert _run("query", "SELECT COUNT FROM c")[0] == 2
    assert _run("--catalog", tmp_path / "nope", "stats")[0] == 4


def test_count_query(cli_catalog):
    code, text = _run("--catalog", cli_catalog, "query", "SELECT COUNT FROM c WHERE r < 30")
    assert code == 0 and text.replace("\r", "").splitlines() == ["count", "3000"]


def test_malformed_query(cli_catalog, capsys):
    code, _ = _run("--catalog", cli_catalog, "query", "SELECT TAG FROM cat WHERE r <")
    assert code == 2 and "1:29" in capsys.readouterr().err
    code, _ = _run("--catalog", cli_catalog, "query", "SELECT TAG FROM c WHERE zz < 1")
    assert code == 2 and "1:25" in capsys.readouterr().err


def test_explain(cli_catalog):
    code, text = _run("--catalog", cli_catalog, "query", "--explain", "SELECT TAG FROM c WHERE CIRCLE(185, 2, 7200)")
    assert code == 0 and "full=" in text and "partial=" in text and "estimate" in text


def test_no_index_matches_indexed(cli_catalog):
    for q in (
        "SELECT TAG FROM c WHERE CIRCLE(185, 2, 72000)",
        "SELECT TAG FROM c WHERE CIRCLE(0, 90, 40000) AND g - r < 0.5",
        "SELECT TAG FROM c WHERE LATBAND(GALACTIC, -10, 10) OR r < 15",
    ):
        a = _run("--catalog", cli_catalog, "query", "--sorted", q)
        b = _run("--catalog", cli_catalog, "query", "--sorted", "--no-index", q)
        assert a[0] == b[0] == 0
        assert a[1] == b[1] and len(a[1].splitlines()) > 2


def test_csv_and_jsonl_output(cli_catalog):
    q = "SELECT obj_id, r, class FROM c WHERE r < 15 ORDER BY r"
    _, text = _run("--catalog", cli_catalog, "query", q)
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["obj_id", "r", "class"]
    assert text.count("\r\n") == len(rows)
    _, text = _run("--catalog", cli_catalog, "--format", "jsonl", "query", q)
    objs = [json.loads(line) for line in text.splitlines()]
    assert len(objs) == len(rows) - 1
    assert [o["obj_id"] for o in objs] == [int(r[0]) for r in rows[1:]]
    assert all(o["class"] in store.CLASSES for o in objs)


def test_metrics_trailer(cli_catalog, capsys):
    code, _ = _run("--catalog", cli_catalog, "query", "--metrics", "SELECT COUNT FROM c")
    err = capsys.readouterr().err
    assert code == 0 and "containers_opened=" in err and "total_latency_s=" in err


def test_query_from_file(cli_catalog, tmp_path):
    f = tmp_path / "q.sql"
    f.write_text("SELECT COUNT\nFROM c\nWHERE class = QSO\n")
    code, text = _run("--catalog", cli_catalog, "query", f"@{f}")
    assert code == 0 and text.splitlines()[0] == "count"


def test_dump_ast():
    code, text = _run("query", "--dump-ast", "SELECT COUNT FROM c WHERE r < 22")
    assert code == 0 and text.startswith("Select\n")


def test_join_commands(cli_catalog, capsys):
    code, text = _run("--catalog", cli_catalog, "join", "neighbors", "--radius", "0.001")
    assert code == 0 and text.splitlines() == ["obj_a,obj_b,sep_arcsec,d_ug,d_gr,d_ri,d_iz"]
    a = _run("--catalog", cli_catalog, "join", "neighbors", "--radius", "3000", "--sorted", "--bucket-level", "2")
    b = _run("--catalog", cli_catalog, "--workers", "3", "join", "neighbors", "--radius", "3000", "--sorted", "--bucket-level", "2")
    assert a[0] == b[0] == 0 and a[1] == b[1] and len(a[1].splitlines()) > 1
    code, _ = _run("--catalog", cli_catalog, "join", "lens", "--radius", "5000")
    assert code == 2 and "too fine" in capsys.readouterr().err
    code, _ = _run("--catalog", cli_catalog, "join", "companion", "--metrics")
    assert code == 0 and "pairs_compared=" in capsys.readouterr().err


def test_lens_on_planted_pairs(tmp_path):
    rng = np.random.default_rng(4)
    centres = synth.uniform_sphere(rng, 6)
    near, _ = synth.planted_pairs(rng, centres, 10.0)
    pos = np.concatenate([centres, near])
    chunk = synth.uniform_chunk(rng, 12, pos=pos)
    rec = chunk.objects
    for m in "ugriz":
        rec[m][6:] = rec[m][:6] + 1.5
    cat = store.Catalog.create(tmp_path / "c")
    cat.ingest(chunk)
    code, text = _run("--catalog", tmp_path / "c", "join", "lens", "--sorted")
    pairs = [tuple(map(int, line.split(",")[:2])) for line in text.splitlines()[1:]]
    assert code == 0 and pairs == [(k, k + 6) for k in range(1, 7)]


def test_sample_and_stats(cli_catalog, tmp_path):
    code, text = _run("--catalog", cli_catalog, "sample", "--fraction", "1.0", "--out", tmp_path / "s")
    assert code == 0 and "objects=3000" in text
    code, text = _run("--catalog", cli_catalog, "sample", "--fraction", "0.1", "--seed", "2", "--out", tmp_path / "t")
    n = store.Catalog(tmp_path / "t").total
    assert code == 0 and abs(n - 300) <= 4 * np.sqrt(3000 * 0.1 * 0.9)
    code, text = _run("--catalog", cli_catalog, "stats")
    r = store.Catalog(cli_catalog).all_records("TAG")["r"]
    assert code == 0 and "total=3000" in text
    assert f"r.min={float(r.min())!r}" in text and f"r.max={float(r.max())!r}" in text
    assert _run("--catalog", cli_catalog, "sample", "--fraction", "2", "--out", tmp_path / "u")[0] == 2


def test_bad_flags():
    assert _run("--workers", "0", "stats")[0] == 2
    assert _run("--format", "xml", "stats")[0] == 2
    assert _run("frobnicate")[0] == 2


def test_extra_frames_file(cli_catalog):
    import pathlib

    frames = pathlib.Path(__file__).parent.parent / "demos" / "frames_supergalactic.txt"
    q = "SELECT COUNT FROM c WHERE LATBAND(SUPERGALACTIC, -10, 10)"
    assert _run("--catalog", cli_catalog, "query", q)[0] == 2
    code, text = _run("--catalog", cli_catalog, "--frames", frames, "query", q)
    assert code == 0 and 0 < int(text.splitlines()[1]) < 3000
