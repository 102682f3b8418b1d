import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from occprior.cli import main
from occprior.occupancy import PointCloud, load_grid
from occprior.ply import write_ply

SCENE = "procedural:textured-sphere"


def fast_flags(cache_dir):
    return ["--scene", SCENE, "--cache-dir", str(cache_dir), "--batch-rays", "256",
            "--step-divisions", "256", "--deterministic"]


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "occprior", "--version"], capture_output=True,
                         text=True, check=True)
    assert out.stdout.strip() == "occprior 0.1.0"


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--scene", SCENE, "--init", "prior", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["train", "--scene", SCENE, "--init", "snapshot", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    assert main(["iou", "x", "y", "--threads", "0"]) == 2


def test_runtime_errors_exit_1(tmp_path):
    assert main(["iou", str(tmp_path / "missing.ingo"), str(tmp_path / "m2.ingo")]) == 1
    assert main(["train", "--scene", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"garbage")
    assert main(["splat", "--ply", str(bad), "--out", str(tmp_path / "g.ingo")]) == 1


def test_splat_empty_ply(tmp_path, capsys):
    ply = tmp_path / "empty.ply"
    write_ply(ply, PointCloud.empty())
    out = tmp_path / "g.ingo"
    assert main(["splat", "--ply", str(ply), "--grid-res", "16", "--out", str(out)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["occupied_cells"] == 0 and stats["points"] == 0
    assert load_grid(out).n_occupied == 0
    assert json.loads(out.with_suffix(".json").read_text())["occupied_cells"] == 0


def test_splat_and_iou(tmp_path, capsys):
    ply = tmp_path / "p.ply"
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, (200, 3))
    write_ply(ply, PointCloud(np.vstack([pts, [[5.0, 0, 0]]])))
    a, b = tmp_path / "a.ingo", tmp_path / "b.ingo"
    assert main(["splat", "--ply", str(ply), "--grid-res", "16", "--out", str(a)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["dropped_points"] == 1 and stats["occupied_cells"] > 0
    assert main(["iou", str(a), str(a)]) == 0
    assert capsys.readouterr().out == "1.000000\n"
    assert main(["splat", "--ply", str(ply), "--grid-res", "16", "--splat-radius", "0",
                 "--out", str(b)]) == 0
    capsys.readouterr()
    assert main(["iou", str(a), str(b)]) == 0
    v = float(capsys.readouterr().out)
    assert 0 < v < 1
    c = tmp_path / "c.ingo"
    assert main(["splat", "--ply", str(ply), "--grid-res", "8", "--out", str(c)]) == 0
    assert main(["iou", str(a), str(c)]) == 1


def test_train_zero_iterations(tmp_path, cache_dir):
    out = tmp_path / "run"
    assert main(["train", *fast_flags(cache_dir), "--iters", "0", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["grid_init.ingo", "manifest.json",
                                                     "model_init.ingw"]
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["iterations"] == 0 and m["tool"]["version"] == "0.1.0"


def test_render_initial_model_empty_grid_is_background(tmp_path, cache_dir):
    out = tmp_path / "run"
    assert main(["train", *fast_flags(cache_dir), "--iters", "0", "--init", "prior",
                 "--prior", str(_empty_ply(tmp_path)), "--out", str(out)]) == 0
    png = tmp_path / "r.png"
    assert main(["render", "--model", str(out / "model_init.ingw"), "--grid",
                 str(out / "grid_init.ingo"), "--size", "16", "--background", "1", "0.5", "0",
                 "--float-dump", "--out", str(png)]) == 0
    img = np.asarray(Image.open(png))
    assert np.all(img == [255, 128, 0])
    np.testing.assert_array_equal(np.load(png.with_suffix(".npy")), np.broadcast_to(
        np.array([1, 0.5, 0], np.float32), (16, 16, 3)))


def _empty_ply(tmp_path):
    p = tmp_path / "empty.ply"
    write_ply(p, PointCloud.empty())
    return p


def test_train_full_run_artifacts(tmp_path, cache_dir):
    out = tmp_path / "run"
    assert main(["train", *fast_flags(cache_dir), "--iters", "12", "--checkpoints", "6", "12",
                 "--init", "prior", "--prior-points", "20000", "--float-dump",
                 "--out", str(out)]) == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) - 1 == 12
    for name in ("model.ingw", "grid.ingo", "report.json", "manifest.json",
                 "checkpoints/iter000012_view3.png", "checkpoints/iter000006_view0.npy"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["checkpoints"] == [6, 12]
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["model"]["density_scale"] == 100.0
    assert m["config"]["grid_init"] == "prior"
    assert main(["render", "--model", str(out / "model.ingw"), "--grid", str(out / "grid.ingo"),
                 "--view", "2", "--size", "24", "--out", str(tmp_path / "v.png")]) == 0
    assert Image.open(tmp_path / "v.png").size == (24, 24)


def test_manifest_replay_byte_identical(tmp_path, cache_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", *fast_flags(cache_dir), "--iters", "8", "--checkpoints", "8",
                 "--init", "prior", "--prior-points", "5000", "--prior-dropout", "0.5",
                 "--out", str(a)]) == 0
    assert main(["train", "--manifest", str(a / "manifest.json"), "--out", str(b)]) == 0
    for name in ("metrics.csv", "grid.ingo", "model.ingw", "checkpoints/iter000008_view0.png"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("INGEO_THREADS", "nope")
    assert main(["iou", "a", "b"]) == 2
