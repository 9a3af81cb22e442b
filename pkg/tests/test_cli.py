import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from confsplat import io
from confsplat.cli import main


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "scene"
    assert run("synth", "--out", root, "--n-gaussians", 5, "--n-views", 3, "--size", 20, "--test-views", 1,
               "--seed", 3) == 0
    return root


def tree_bytes(root: Path, skip=()):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name not in skip}


def test_align_recovers_generator_affine(scene):
    assert run("align", "--scene", scene) == 0
    meta = io.load_scene_meta(scene)
    for v in meta["views"]:
        side = json.loads((scene / "views" / v["name"] / "alignment.json").read_text())
        assert abs(side["scale"] - v["mono_scale"]) < 1e-3 and abs(side["shift"] - v["mono_shift"]) < 1e-3
        assert side["valid_count"] >= 2


def test_confidence_maps(scene):
    assert run("confidence", "--scene", scene, "--preview") == 0
    conf = io.read_depth(scene / "views" / "view_000" / "confidence.conf")
    assert conf.plane().min() >= 0 and conf.plane().max() <= 1
    assert (scene / "views" / "view_000" / "confidence_preview.png").is_file()


def test_train_is_reproducible(scene, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\niterations = 12\nseed = 5\n[run]\ncheckpoint_every = 6\n")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("--log-file", tmp_path / f"{name}.log", "train", "--scene", scene, "--config", cfg,
                   "--out", out) == 0
        outs.append(tree_bytes(out))
    assert outs[0] == outs[1]
    assert {"final.ply", "history.csv", "config.ini", "checkpoints/iter_000006.ply"} <= set(outs[0])
    hist = (tmp_path / "a" / "history.csv").read_text().splitlines()
    assert len(hist) == 13


def test_render_eval_and_curves(scene, tmp_path, capsys):
    cam = scene / "test_views" / "view_000" / "camera.json"
    pred = tmp_path / "pred" / "view_000" / "image"
    assert run("render", "--checkpoint", scene / "gt_gaussians.ply", "--camera", cam, "--out", pred) == 0
    assert pred.with_suffix(".cdg").is_file()
    report = tmp_path / "e2.json"
    assert run("eval2d", "--pred", tmp_path / "pred", "--gt", scene / "test_views", "--out", report) == 0
    rep = json.loads(report.read_text())
    assert rep["images"]["view_000/image.png"]["psnr"] == float("inf")

    out = tmp_path / "e3"
    assert run("eval3d", "--rec", scene / "gt_gaussians.ply", "--gt", scene / "gt_gaussians.ply", "--out", out) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["fscore_percent"] == 100.0
    cols = io.read_ply(out / "m3c2.ply")
    assert "m3c2_dist" in cols

    hist = tmp_path / "h.csv"
    hist.write_text("iteration,image_loss,depth_loss,lambda_d,total_loss,psnr_train\n"
                    + "".join(f"{i},{1.0 / i},0.0,0.6,{1.0 / i},20.0\n" for i in range(1, 31)))
    curves = tmp_path / "c.csv"
    assert run("curves", "--history", hist, "--window", 10, "--every", 5, "--out", curves) == 0
    rows = curves.read_text().splitlines()
    assert rows[0].startswith("iteration,image_loss_mean") and len(rows) == 6
    assert rows[1].split(",")[0] == "10"


def test_error_prefix(tmp_path, capsys):
    assert run("align", "--scene", tmp_path) != 0
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("ERROR:align:")
    bad = tmp_path / "bad.ini"
    bad.write_text("[loss]\nunknown_key = 1\n")
    assert run("train", "--scene", tmp_path, "--config", bad) != 0
    assert capsys.readouterr().err.startswith("ERROR:train:")
    assert run("curves", "--history", tmp_path / "missing.csv") != 0
    assert capsys.readouterr().err.startswith("ERROR:curves:")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "confsplat.cli", "eval3d", "--rec", tmp_path / "x.ply",
                           "--gt", tmp_path / "y.ply"], capture_output=True, text=True)
    assert proc.returncode != 0 and proc.stderr.startswith("ERROR:eval3d:")
