"""Command-line entry point: ``itportrait {invert,train,render,eval,toy-style}``.

Run directory layout (``RUN`` is the directory given to ``invert --out`` and
``train --run``)::

    RUN/config.json                     merged configuration snapshot
    RUN/manifests/<command>.json        one manifest per command, written first
    RUN/inversion/latent.bin, pose.bin  binary containers
    RUN/inversion/latent.json, pose.json
    RUN/inversion/loss_log.jsonl        one record per optimisation step
    RUN/inversion/metrics.json          reconstruction vs style image
    RUN/inversion/summary.json          initial/final camera, final loss terms
    RUN/inversion/style.png, reconstruction.png
    RUN/train/apt_loss.jsonl            paired-sample losses
    RUN/train/fusion_state.jsonl        one fusion record per step
    RUN/train/checkpoints/epoch_NNNN/   periodic checkpoints
    RUN/train/final/                    final checkpoint plus latent.bin, pose.bin
    RUN/train/summary.json
    RUN/render/                         written by ``render CKPT --out RUN/render``
    RUN/eval/report.json

Exit codes: 0 success, 2 bad input or configuration, 3 divergence,
4 incomplete run directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .backends import resolve_backends
from .config import apply_overrides, build_config, config_to_dict, default_backend, read_config_file
from .errors import (BackendUnavailableError, ConfigurationError, DimensionError, DivergenceError,
                     IncompatibleCheckpointError, PoseEstimationError)
from .imageio import load_png, save_png, tile_grid
from .inversion import init_pose_from_photo, invert_artistic, random_pose
from .latent import CameraPose, SeededRng, canonical_pose
from .latent import load as load_container
from .latent import save as save_container
from .latent import to_text
from .metrics import REPORT_KEYS, evaluate_pair
from .trainer import (alternate_train, generator_from_state, initial_state, latest_checkpoint, load_checkpoint,
                      save_checkpoint)

log = logging.getLogger("itportrait")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_INCOMPLETE = 0, 2, 3, 4

INVERSION_ARTIFACTS = ("latent.bin", "pose.bin", "latent.json", "pose.json", "loss_log.jsonl", "metrics.json",
                       "summary.json", "style.png", "reconstruction.png")
TRAIN_ARTIFACTS = ("apt_loss.jsonl", "fusion_state.jsonl", "summary.json", "final/meta.json", "final/state.pt",
                   "final/latent.bin", "final/pose.bin")
REPORT_SCHEMA = {
    "schema_version": None,
    "run_dir": None,
    "metrics": ("inversion", "stylized", "fused"),
    "gate": ("steps", "skipped", "above_tau", "gamma0_fraction", "gamma0_fraction_above_tau",
             "expected_gamma0_fraction_above_tau", "tau", "xi"),
    "distance": ("trajectory", "first", "last", "mean"),
    "losses": ("window", "L_IT_first_window", "L_IT_last_window", "apt_first", "apt_last"),
    "render": ("present", "views"),
}
LOSS_WINDOW = 20


class CommandError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


# -- small helpers -----------------------------------------------------------

def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_jsonl(path: Path) -> list:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _pose_record(p: CameraPose) -> dict:
    return {"yaw": p.yaw, "pitch": p.pitch, "radius": p.radius}


class Manifest:
    """The record a command writes before doing any work and completes at the end."""

    def __init__(self, path: Path, command: str, argv, config: dict | None, config_path, out_dir, seed):
        self.path = path
        self.data = {
            "command": command, "argv": list(argv), "version": __version__,
            "config_path": str(config_path) if config_path else None, "config": config,
            "out_dir": str(out_dir), "seed": seed, "backend": (config or {}).get("backend"),
            "status": "running", "started": time.strftime("%Y-%m-%dT%H:%M:%S"), "notes": [], "artifacts": [],
        }
        _write_json(path, self.data)

    def note(self, text: str):
        self.data["notes"].append(text)

    def finish(self, status: str, artifacts=(), **extra):
        self.data.update(status=status, artifacts=[str(a) for a in artifacts], **extra)
        _write_json(self.path, self.data)


def _resolve_config(config_path, overrides, base: dict | None = None):
    data = read_config_file(config_path) if config_path else dict(base or {})
    cfg, backend = build_config(apply_overrides(data, overrides))
    return cfg, backend


def _prepare_style(image: torch.Tensor, resolution: int) -> torch.Tensor:
    if image.shape[-1] != resolution or image.shape[-2] != resolution:
        log.warning("style image is %dx%d; resizing to %dx%d", image.shape[-1], image.shape[-2], resolution, resolution)
        image = F.interpolate(image.unsqueeze(0), size=(resolution, resolution), mode="bilinear",
                              align_corners=False, antialias=True)[0].clamp(0, 1)
    return image


def _missing(root: Path, names) -> list[str]:
    return [str(root / n) for n in names if not (root / n).exists()]


# -- invert ------------------------------------------------------------------

def run_inversion(style_path: Path, run: Path, cfg, backend: str, pose_init: bool, manifest: Manifest) -> list[Path]:
    backends = resolve_backends(backend)
    style = _prepare_style(load_png(style_path), backends.g3d.resolution)
    rng = SeededRng(cfg.seed, "invert")
    inv_cfg = cfg.inversion
    mode = "photo"
    if not (pose_init and inv_cfg.pose_init):
        init = random_pose(rng.spawn("random-pose"), inv_cfg.random_yaw_range, inv_cfg.random_pitch_range)
        mode = "random"
    else:
        try:
            if backends.inverter2d is None:
                raise PoseEstimationError("backend has no 2D inverter")
            w2d = backends.inverter2d.invert(style)
            init = init_pose_from_photo(style, w2d, rng.spawn("pose-init"), inv_cfg, backends.g2d, backends.estimator)
        except PoseEstimationError as exc:
            log.warning("pose estimation failed (%s); falling back to the canonical pose", exc)
            manifest.note(f"pose estimation failed: {exc}; canonical pose used")
            init, mode = canonical_pose(), "canonical-fallback"
    log.info("inverting from %s camera (yaw %.2f, pitch %.2f)", mode, init.yaw, init.pitch)
    res = invert_artistic(style, init, inv_cfg, backends.g3d, backends.oracle)
    out = run / "inversion"
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        recon = backends.g3d(res.w3d, res.pose)
    save_container(res.w3d, out / "latent.bin")
    save_container(res.pose, out / "pose.bin")
    (out / "latent.json").write_text(to_text(res.w3d), encoding="utf-8")
    (out / "pose.json").write_text(to_text(res.pose), encoding="utf-8")
    with open(out / "loss_log.jsonl", "w", encoding="utf-8") as f:
        for rec in res.history:
            f.write(json.dumps(rec) + "\n")
    report = evaluate_pair(recon, style, backends.oracle)
    _write_json(out / "metrics.json", report.to_record())
    _write_json(out / "summary.json", {"pose_init": mode, "init_pose": _pose_record(init),
                                       "pose": _pose_record(res.pose), "losses": res.losses, "steps": res.steps})
    save_png(style, out / "style.png")
    save_png(recon, out / "reconstruction.png")
    manifest.data["pose_init"] = mode
    return [out / n for n in INVERSION_ARTIFACTS]


def cmd_invert(args) -> int:
    style_path = Path(args.style)
    if not style_path.is_file():
        raise CommandError(f"style image not found: {style_path}")
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.steps is not None:
        overrides.append(f"inversion.steps={args.steps}")
    cfg, backend = _resolve_config(args.config, overrides)
    run = Path(args.out)
    run.mkdir(parents=True, exist_ok=True)
    snapshot = config_to_dict(cfg, backend)
    manifest = Manifest(run / "manifests" / "invert.json", "invert", args.argv, snapshot, args.config, run, cfg.seed)
    _write_json(run / "config.json", snapshot)
    artifacts = run_inversion(style_path, run, cfg, backend, not args.no_pose_init, manifest)
    return _finish(manifest, artifacts)


def _finish(manifest: Manifest, artifacts, **extra) -> int:
    missing = [str(a) for a in artifacts if not Path(a).exists()]
    if missing:
        manifest.finish("incomplete", artifacts, missing=missing, **extra)
        raise CommandError("artifacts not written: " + ", ".join(missing), EXIT_INCOMPLETE)
    manifest.finish("ok", artifacts, **extra)
    return EXIT_OK


# -- train -------------------------------------------------------------------

def _last_active(records):
    for rec in reversed(records):
        if not rec["skipped"]:
            return rec
    return records[-1] if records else None


def cmd_train(args) -> int:
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    base = None
    if not args.config and (run / "config.json").exists():
        base = read_config_file(run / "config.json")
    overrides = list(args.set or [])
    if args.epochs is not None:
        overrides.append(f"epochs={args.epochs}")
    if args.text is not None:
        overrides.append(f"fusion.target_text={json.dumps(args.text)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.checkpoint_every is not None:
        overrides.append(f"checkpoint_every={args.checkpoint_every}")
    cfg, backend = _resolve_config(args.config, overrides, base)
    snapshot = config_to_dict(cfg, backend)
    manifest = Manifest(run / "manifests" / "train.json", "train", args.argv, snapshot, args.config, run, cfg.seed)
    manifest.data.update(source_text=cfg.fusion.source_text, target_text=cfg.fusion.target_text)
    _write_json(run / "config.json", snapshot)

    inv = run / "inversion"
    needed = ("latent.bin", "pose.bin", "style.png")
    if _missing(inv, needed):
        if args.style is None:
            raise CommandError("inversion outputs missing (run `itportrait invert` first or pass --style): "
                               + ", ".join(_missing(inv, needed)))
        manifest.note("inversion produced inline")
        run_inversion(Path(args.style), run, cfg, backend, True, manifest)
    backends = resolve_backends(backend)
    w3d, pose = load_container(inv / "latent.bin"), load_container(inv / "pose.bin")
    style = load_png(inv / "style.png")

    ckpt_root = run / "train" / "checkpoints"
    if args.resume:
        ckpt = latest_checkpoint(ckpt_root)
        if ckpt is None:
            raise CommandError(f"--resume given but no checkpoint found under {ckpt_root}")
        state = load_checkpoint(ckpt)
        manifest.note(f"resumed from {ckpt} at epoch {state.epoch}")
        log.info("resuming from %s (epoch %d)", ckpt, state.epoch)
    else:
        state = initial_state(cfg, backends.g3d, w3d, pose)
        if ckpt_root.exists():
            for old in ckpt_root.glob("epoch_*"):
                shutil.rmtree(old)
    state.config = snapshot

    def progress(epoch, apt, fusion):
        if (epoch + 1) % max(1, cfg.epochs // 10) == 0:
            last = fusion[-1] if fusion else {}
            log.info("epoch %d/%d  apt %.5f  L_IT %s  D %.4f", epoch + 1, cfg.epochs, apt[-1]["loss"],
                     last.get("L_IT"), last.get("D", float("nan")))

    state, g_s, g_t = alternate_train(cfg, backends, style, w3d, pose, state=state, run_dir=run, callback=progress)
    final = run / "train" / "final"
    save_checkpoint(state, final)
    save_container(state.w3d, final / "latent.bin")
    save_container(state.pose, final / "pose.bin")
    last = _last_active(state.fusion)
    gammas = [r["gamma"] for r in state.fusion]
    summary = {
        "epochs": state.epoch,
        "source_text": cfg.fusion.source_text, "target_text": cfg.fusion.target_text,
        "final": {k: last[k] for k in ("L_I", "L_T", "L_IT", "D", "gamma")} if last else None,
        "apt_loss_final": state.apt_losses[-1]["loss"] if state.apt_losses else None,
        "gamma0_fraction": gammas.count(0) / len(gammas) if gammas else None,
    }
    _write_json(run / "train" / "summary.json", summary)
    return _finish(manifest, [run / "train" / n for n in TRAIN_ARTIFACTS])


# -- render ------------------------------------------------------------------

def parse_sweep(text: str) -> list[float]:
    """``a:b:step`` to the inclusive list ``a, a+step, ..., b``."""
    try:
        a, b, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise CommandError(f"--yaw-sweep expects a:b:step, got {text!r}") from None
    if a == b:
        return [a]
    if step <= 0 or b < a:
        raise CommandError(f"--yaw-sweep needs a <= b and a positive step, got {text!r}")
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return [a + i * step for i in range(n)]


def cmd_render(args) -> int:
    ckpt = Path(args.checkpoint)
    if not (ckpt / "meta.json").exists():
        raise CommandError(f"not a checkpoint directory: {ckpt}")
    state = load_checkpoint(ckpt)
    cfg, backend = build_config(state.config)
    if args.backend:
        backend = args.backend
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out / "manifest.json", "render", args.argv, config_to_dict(cfg, backend), None, out, cfg.seed)
    manifest.data["checkpoint"] = str(ckpt)
    yaws = parse_sweep(args.yaw_sweep)
    lo, hi = cfg.fusion.yaw_range
    plo, phi = cfg.fusion.pitch_range
    pitch = float(args.pitch)
    clamped = []
    for y in yaws:
        c = min(max(y, lo), hi)
        if c != y:
            log.warning("yaw %.1f outside [%.1f, %.1f]; clamped to %.1f", y, lo, hi, c)
        clamped.append(c)
    if not plo <= pitch <= phi:
        c = min(max(pitch, plo), phi)
        log.warning("pitch %.1f outside [%.1f, %.1f]; clamped to %.1f", pitch, plo, phi, c)
        pitch = c
    if clamped != yaws:
        manifest.note("some poses were clamped to the configured ranges")

    backends = resolve_backends(backend)
    g_o = backends.g3d
    g_s = generator_from_state(g_o, state.g_s)
    g_t = generator_from_state(g_o, state.g_t)
    rows = {"source": [], "style": [], "fused": []}
    views, artifacts = [], []
    with torch.no_grad():
        for i, y in enumerate(clamped):
            pose = CameraPose.from_angles(y, pitch)
            files = {}
            for name, g in (("source", g_o), ("style", g_s), ("fused", g_t)):
                img = g(state.w3d, pose)[0]
                rows[name].append(img)
                path = save_png(img, out / "views" / f"{name}_{i:02d}.png")
                files[name] = str(path.relative_to(out))
                artifacts.append(path)
            views.append({"index": i, "yaw": y, "pitch": pitch, "files": files})
    artifacts.append(save_png(tile_grid([rows["source"], rows["style"], rows["fused"]]), out / "grid.png"))
    artifacts.append(_write_json(out / "views.json", {"views": views, "rows": ["source", "style", "fused"]}))
    return _finish(manifest, artifacts)


# -- eval --------------------------------------------------------------------

def gate_statistics(records, tau: float, xi: int) -> dict:
    above = [r for r in records if r["D"] > tau]
    steps = len(records)
    return {
        "steps": steps,
        "skipped": sum(1 for r in records if r["skipped"]),
        "above_tau": len(above),
        "gamma0_fraction": (sum(1 for r in records if r["gamma"] == 0) / steps) if steps else None,
        "gamma0_fraction_above_tau": (sum(1 for r in above if r["gamma"] == 0) / len(above)) if above else None,
        "expected_gamma0_fraction_above_tau": xi / 100.0,
        "tau": tau,
        "xi": xi,
    }


def _window_mean(values, first: bool, window: int):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    w = min(window, len(vals))
    return float(np.mean(vals[:w] if first else vals[-w:]))


def cmd_eval(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise CommandError(f"run directory not found: {run}", EXIT_INCOMPLETE)
    required = ["config.json", "manifests/invert.json", "manifests/train.json"]
    required += [f"inversion/{n}" for n in INVERSION_ARTIFACTS]
    required += [f"train/{n}" for n in TRAIN_ARTIFACTS]
    missing = _missing(run, required)
    if missing:
        raise CommandError("incomplete run directory; missing:\n  " + "\n  ".join(missing), EXIT_INCOMPLETE)
    cfg, backend = build_config(read_config_file(run / "config.json"))
    out = Path(args.out) if args.out else run / "eval"
    manifest = Manifest(run / "manifests" / "eval.json", "eval", args.argv, config_to_dict(cfg, backend), None, out,
                        cfg.seed)

    backends = resolve_backends(backend)
    state = load_checkpoint(run / "train" / "final")
    style = load_png(run / "inversion" / "style.png").unsqueeze(0)
    with torch.no_grad():
        g_s = generator_from_state(backends.g3d, state.g_s)
        g_t = generator_from_state(backends.g3d, state.g_t)
        stylized = evaluate_pair(g_s(state.w3d, state.pose), style, backends.oracle).to_record()
        fused = evaluate_pair(g_t(state.w3d, state.pose), style, backends.oracle).to_record()
    inversion = json.loads((run / "inversion" / "metrics.json").read_text(encoding="utf-8"))
    fusion = _read_jsonl(run / "train" / "fusion_state.jsonl")
    apt = [r["loss"] for r in _read_jsonl(run / "train" / "apt_loss.jsonl")]
    traj = [r["D"] for r in fusion]
    l_it = [r["L_IT"] for r in fusion]
    render_views = run / "render" / "views.json"
    report = {
        "schema_version": 1,
        "run_dir": str(run),
        "metrics": {"inversion": {k: inversion[k] for k in REPORT_KEYS}, "stylized": stylized, "fused": fused},
        "gate": gate_statistics(fusion, cfg.fusion.tau, cfg.fusion.xi),
        "distance": {"trajectory": traj, "first": traj[0] if traj else None, "last": traj[-1] if traj else None,
                     "mean": float(np.mean(traj)) if traj else None},
        "losses": {"window": LOSS_WINDOW, "L_IT_first_window": _window_mean(l_it, True, LOSS_WINDOW),
                   "L_IT_last_window": _window_mean(l_it, False, LOSS_WINDOW),
                   "apt_first": apt[0] if apt else None, "apt_last": apt[-1] if apt else None},
        "render": {"present": render_views.exists(),
                   "views": len(json.loads(render_views.read_text())["views"]) if render_views.exists() else 0},
    }
    path = _write_json(out / "report.json", report)
    return _finish(manifest, [path])


# -- toy-style ---------------------------------------------------------------

def cmd_toy_style(args) -> int:
    from .backends.toy import make_toy_case

    backends = resolve_backends(args.backend or default_backend())
    case = make_toy_case(backends, SeededRng(args.seed, "toy-style"), style=args.style)
    save_png(case.style_image, args.out)
    if args.photo:
        save_png(case.photo, args.photo)
    print(json.dumps({"out": str(args.out), "pose": _pose_record(case.pose), "style": args.style, "seed": args.seed}))
    return EXIT_OK


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itportrait", description="One-shot 3D portrait stylisation with image-text fusion.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, help="override the run seed")

    sp = sub.add_parser("invert", help="invert a style image into the 3D generator")
    sp.add_argument("style", help="style image (PNG)")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--no-pose-init", action="store_true", help="start from a random camera instead of the estimate")
    sp.add_argument("--steps", type=int, help="override inversion.steps")
    common(sp)
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("train", help="alternating stylisation and text-fusion training")
    sp.add_argument("--run", required=True, help="run directory (holding inversion outputs)")
    sp.add_argument("--style", help="style image; runs inversion first if the run has none")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--text", help="target text")
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("render", help="render source/style/fused views from a checkpoint")
    sp.add_argument("checkpoint", help="checkpoint directory (e.g. RUN/train/final)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--yaw-sweep", default="-50:50:25", help="a:b:step in degrees, inclusive; write --yaw-sweep=-50:50:25 for negative starts")
    sp.add_argument("--pitch", type=float, default=0.0)
    sp.add_argument("--backend", help="override the backend recorded in the checkpoint")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="consolidated report for a finished run")
    sp.add_argument("run")
    sp.add_argument("--out", help="report directory (default RUN/eval)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("toy-style", help="write a seeded toy artistic portrait")
    sp.add_argument("out")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--style", type=int, default=0)
    sp.add_argument("--photo", help="also write the underlying photo render here")
    sp.add_argument("--backend")
    sp.set_defaults(func=cmd_toy_style)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = ["itportrait", *argv]
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigurationError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as exc:
        where = "epoch" if exc.stage in ("apt", "ite") else "step"
        print(f"error: {exc.stage} stage diverged at {where} {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (IncompatibleCheckpointError, BackendUnavailableError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
