import json

import numpy as np
import pytest

from multimix.persist import Manifest, fmt, read_csv, sha256, write_csv
from multimix.ppm import read_ppm, write_ppm


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", rgb)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), rgb)
    gray = rng.integers(0, 256, size=(4, 3), dtype=np.uint8)
    write_ppm(tmp_path / "g.pgm", gray)
    assert np.array_equal(read_ppm(tmp_path / "g.pgm")[:, :, 0], gray)


def test_ppm_header_comments(tmp_path):
    raster = bytes(range(6))
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n3 2 # size\n255\n" + raster)
    img = read_ppm(tmp_path / "c.pgm")
    assert img.shape == (2, 3, 1) and img.ravel().tolist() == list(range(6))


def test_ppm_errors(tmp_path):
    with pytest.raises(TypeError):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2)))
    (tmp_path / "p3.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "p3.ppm")
    (tmp_path / "deep.pgm").write_bytes(b"P5\n1 1\n65535\n\0\0")
    with pytest.raises(ValueError):
        read_ppm(tmp_path / "deep.pgm")


def test_fmt():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(np.float64(2.5)) == "2.5"
    assert fmt(True) == "1" and fmt(np.int64(3)) == "3" and fmt(None) == ""


def test_csv_roundtrip_bytes(tmp_path):
    rows = [(1, 0.1, "a"), (2, 1e-20, "b")]
    write_csv(tmp_path / "x.csv", ["i", "v", "s"], rows)
    data = (tmp_path / "x.csv").read_bytes()
    assert b"\r" not in data and data.endswith(b"\n")
    back = read_csv(tmp_path / "x.csv")
    assert [float(r["v"]) for r in back] == [0.1, 1e-20]
    write_csv(tmp_path / "y.csv", ["i", "v", "s"], rows)
    assert sha256(tmp_path / "x.csv") == sha256(tmp_path / "y.csv")


def test_manifest_lifecycle(tmp_path):
    m = Manifest(tmp_path, "demo", {"k": 3})
    assert json.loads(m.path.read_text())["status"] == "running"
    write_csv(tmp_path / "out.csv", ["a"], [(1,)])
    m.time("total", 0.12345)
    m.finalize()
    data = json.loads(m.path.read_text())
    assert data["status"] == "ok" and data["config"] == {"k": 3}
    assert data["artifacts"] == {"out.csv": sha256(tmp_path / "out.csv")}
    assert data["timings"]["total"] == 0.123
