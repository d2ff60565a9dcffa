import json
import shutil
import subprocess
import sys

import pytest
import torch

import itportrait.stylizer
from itportrait.backends.toy import ToyPoseEstimator
from itportrait.cli import REPORT_SCHEMA, gate_statistics, main, parse_sweep
from itportrait.errors import PoseEstimationError
from itportrait.fusion import FusionConfig, select_gamma
from itportrait.imageio import load_png
from itportrait.latent import SeededRng


def read(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def style_png(tmp_path_factory):
    path = tmp_path_factory.mktemp("style") / "style.png"
    assert main(["toy-style", str(path), "--seed", "3"]) == 0
    return path


@pytest.fixture(scope="module")
def small_run(tmp_path_factory, style_png):
    """invert -> train -> render -> eval with short schedules."""
    run = tmp_path_factory.mktemp("run")
    assert main(["invert", str(style_png), "--out", str(run), "--steps", "120"]) == 0
    assert main(["train", "--run", str(run), "--epochs", "10", "--checkpoint-every", "5",
                 "--text", "a portrait, wearing glasses"]) == 0
    assert main(["render", str(run / "train" / "final"), "--out", str(run / "render"),
                 "--yaw-sweep=-50:50:25"]) == 0
    assert main(["eval", str(run)]) == 0
    return run


# -- invert ------------------------------------------------------------------

def test_invert_artifacts(small_run):
    inv = small_run / "inversion"
    for name in ("latent.bin", "pose.bin", "latent.json", "pose.json", "loss_log.jsonl", "metrics.json",
                 "summary.json", "style.png", "reconstruction.png"):
        assert (inv / name).is_file(), name
    assert set(read(inv / "metrics.json")) == {"mse", "ssim", "psnr_db", "perceptual", "identity"}
    assert len((inv / "loss_log.jsonl").read_text().splitlines()) == 121
    manifest = read(small_run / "manifests" / "invert.json")
    assert manifest["status"] == "ok" and manifest["pose_init"] == "photo"
    assert manifest["config"]["inversion"]["steps"] == 120


def test_invert_missing_image(tmp_path, capsys):
    missing = tmp_path / "nope.png"
    assert main(["invert", str(missing), "--out", str(tmp_path / "r")]) != 0
    assert str(missing) in capsys.readouterr().err


def test_invert_bad_config(tmp_path, style_png, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"fusion": {"xi": 0}}))
    assert main(["invert", str(style_png), "--out", str(tmp_path / "r"), "--config", str(cfg)]) != 0
    assert "fusion.xi" in capsys.readouterr().err
    assert main(["invert", str(style_png), "--out", str(tmp_path / "r"), "--set", "inversion.alpah=0.3"]) != 0
    assert "inversion.alpah" in capsys.readouterr().err


def test_invert_estimator_failure_falls_back(tmp_path, style_png, monkeypatch):
    def fail(self, image):
        raise PoseEstimationError("simulated failure")

    monkeypatch.setattr(ToyPoseEstimator, "__call__", fail)
    run = tmp_path / "r"
    assert main(["invert", str(style_png), "--out", str(run), "--steps", "3"]) == 0
    manifest = read(run / "manifests" / "invert.json")
    assert manifest["pose_init"] == "canonical-fallback"
    assert any("simulated failure" in n for n in manifest["notes"])
    assert read(run / "inversion" / "summary.json")["init_pose"]["yaw"] == 0.0


def test_no_pose_init_is_worse(tmp_path, style_png):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["invert", str(style_png), "--out", str(a)]) == 0
    assert main(["invert", str(style_png), "--out", str(b), "--no-pose-init"]) == 0
    psnr_init = read(a / "inversion" / "metrics.json")["psnr_db"]
    psnr_rand = read(b / "inversion" / "metrics.json")["psnr_db"]
    assert psnr_rand < psnr_init
    assert read(b / "manifests" / "invert.json")["pose_init"] == "random"


# -- train -------------------------------------------------------------------

def test_train_artifacts_and_manifest(small_run):
    train = small_run / "train"
    assert len((train / "fusion_state.jsonl").read_text().splitlines()) == 10
    assert len((train / "apt_loss.jsonl").read_text().splitlines()) == 10
    summary = read(train / "summary.json")
    assert set(summary["final"]) == {"L_I", "L_T", "L_IT", "D", "gamma"}
    manifest = read(small_run / "manifests" / "train.json")
    assert manifest["source_text"] == "photo"
    assert manifest["target_text"] == "a portrait, wearing glasses"
    assert manifest["status"] == "ok"
    assert sorted(p.name for p in (train / "checkpoints").iterdir()) == ["epoch_0005", "epoch_0010"]


def test_train_needs_inversion(tmp_path, capsys):
    assert main(["train", "--run", str(tmp_path), "--epochs", "2"]) != 0
    assert "inversion outputs missing" in capsys.readouterr().err


def test_train_inline_inversion(tmp_path, style_png):
    assert main(["train", "--run", str(tmp_path), "--style", str(style_png), "--epochs", "2",
                 "--set", "inversion.steps=5"]) == 0
    assert (tmp_path / "inversion" / "latent.bin").is_file()
    assert any("inline" in n for n in read(tmp_path / "manifests" / "train.json")["notes"])


def test_resume_matches_uninterrupted(tmp_path, small_run):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        shutil.copytree(small_run / "inversion", d / "inversion")
        shutil.copy(small_run / "config.json", d / "config.json")
    assert main(["train", "--run", str(a), "--epochs", "30", "--checkpoint-every", "25"]) == 0
    assert main(["train", "--run", str(b), "--epochs", "25", "--checkpoint-every", "25"]) == 0
    assert main(["train", "--run", str(b), "--epochs", "30", "--checkpoint-every", "25", "--resume"]) == 0
    fa, fb = read(a / "train" / "summary.json")["final"], read(b / "train" / "summary.json")["final"]
    for key in ("L_I", "L_T", "L_IT", "D"):
        assert abs(fa[key] - fb[key]) <= 1e-6
    assert len((b / "train" / "fusion_state.jsonl").read_text().splitlines()) == 30


def test_resume_without_checkpoint(tmp_path, small_run, capsys):
    shutil.copytree(small_run / "inversion", tmp_path / "inversion")
    assert main(["train", "--run", str(tmp_path), "--epochs", "3", "--resume"]) != 0
    assert "no checkpoint" in capsys.readouterr().err


def test_train_divergence_exit(tmp_path, small_run, monkeypatch, capsys):
    shutil.copytree(small_run / "inversion", tmp_path / "inversion")
    monkeypatch.setattr(itportrait.stylizer, "apt_loss", lambda *a, **k: torch.tensor(float("nan")))
    assert main(["train", "--run", str(tmp_path), "--epochs", "3"]) == 3
    err = capsys.readouterr().err
    assert "apt stage diverged at epoch 0" in err


# -- render ------------------------------------------------------------------

def test_parse_sweep():
    assert parse_sweep("-50:50:25") == [-50, -25, 0, 25, 50]
    assert parse_sweep("0:10:4") == [0, 4, 8]
    assert parse_sweep("5:5:1") == [5]
    for bad in ("1:2", "a:b:c", "0:10:0", "10:0:5"):
        with pytest.raises(Exception):
            parse_sweep(bad)


def test_render_views_and_grid(small_run):
    out = small_run / "render"
    views = read(out / "views.json")["views"]
    assert len(views) == 5
    assert [v["yaw"] for v in views] == [-50, -25, 0, 25, 50]
    grid = load_png(out / "grid.png")
    assert grid.shape == (3, 3 * 64, 5 * 64)
    assert len(list((out / "views").glob("*.png"))) == 15


def test_render_deterministic(tmp_path, small_run):
    ck = small_run / "train" / "final"
    assert main(["render", str(ck), "--out", str(tmp_path / "x"), "--yaw-sweep=-50:50:25"]) == 0
    for f in sorted((small_run / "render" / "views").iterdir()):
        assert (tmp_path / "x" / "views" / f.name).read_bytes() == f.read_bytes()
    assert (tmp_path / "x" / "grid.png").read_bytes() == (small_run / "render" / "grid.png").read_bytes()


def test_render_clamps_out_of_range(tmp_path, small_run, caplog):
    ck = small_run / "train" / "final"
    assert main(["render", str(ck), "--out", str(tmp_path), "--yaw-sweep=-80:80:80", "--pitch", "45"]) == 0
    views = read(tmp_path / "views.json")["views"]
    assert [v["yaw"] for v in views] == [-50, 0, 50]
    assert all(v["pitch"] == 30 for v in views)
    assert "clamped" in caplog.text


def test_render_bad_checkpoint(tmp_path):
    assert main(["render", str(tmp_path), "--out", str(tmp_path / "o")]) != 0


# -- eval --------------------------------------------------------------------

def test_eval_report_schema(small_run):
    report = read(small_run / "eval" / "report.json")
    assert set(report) == set(REPORT_SCHEMA)
    for key, fields in REPORT_SCHEMA.items():
        if fields is not None:
            assert set(report[key]) == set(fields), key
    for m in report["metrics"].values():
        assert set(m) == {"mse", "ssim", "psnr_db", "perceptual", "identity"}
    assert len(report["distance"]["trajectory"]) == 10
    assert report["render"] == {"present": True, "views": 5}


def test_eval_empty_dir(tmp_path, capsys):
    assert main(["eval", str(tmp_path)]) != 0
    err = capsys.readouterr().err
    assert "missing" in err and "fusion_state.jsonl" in err
    assert main(["eval", str(tmp_path / "absent")]) != 0


def test_gate_fraction_from_stream(tmp_path, small_run):
    run = tmp_path / "run"
    shutil.copytree(small_run, run)
    cfg = FusionConfig()
    rng = SeededRng(11, "gate")
    with open(run / "train" / "fusion_state.jsonl", "w") as f:
        for e in range(10_000):
            gamma, draw = select_gamma(0.9, rng, cfg)
            f.write(json.dumps({"epoch": e, "D": 0.9, "draw": draw, "gamma": gamma, "L_I": 0.5, "L_T": 0.5,
                                "L_IT": 0.5, "skipped": False, "poses": []}) + "\n")
    assert main(["eval", str(run)]) == 0
    gate = read(run / "eval" / "report.json")["gate"]
    assert gate["steps"] == gate["above_tau"] == 10_000
    assert 0.48 <= gate["gamma0_fraction"] <= 0.52
    assert gate["expected_gamma0_fraction_above_tau"] == 0.5


def test_gate_statistics_below_tau():
    records = [{"D": 0.3, "gamma": 0, "skipped": False}] * 5
    stats = gate_statistics(records, 0.7, 50)
    assert stats["gamma0_fraction"] == 1.0 and stats["above_tau"] == 0
    assert stats["gamma0_fraction_above_tau"] is None


# -- misc --------------------------------------------------------------------

def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "itportrait", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("invert", "train", "render", "eval"):
        assert cmd in out.stdout
