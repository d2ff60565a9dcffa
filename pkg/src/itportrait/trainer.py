"""Alternating training of the image-stylised and text-edited generators.

Three copies of the pretrained 3D generator take part:

``g_o``  frozen reference (source renders);
``g_s``  fine-tuned towards the style image from paired samples;
``g_t``  fine-tuned with the gated image/text direction losses.

Each epoch runs ``apt_steps`` paired-sample steps on ``g_s`` and then
``ite_steps`` fusion steps on ``g_t``, each stage with its own Adam state.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .backends.base import SUBMODULES, Backends, Generator3D, ParameterView, parameter_hash
from .errors import ConfigurationError, IncompatibleCheckpointError
from .fusion import FusionConfig, ite_step, text_direction
from .inversion import InversionConfig, InversionResult, invert_artistic
from .latent import CameraPose, LatentCode, SeededRng
from .stylizer import PairedSample, StylizeConfig, apt_step, make_paired_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
DEFAULT_TRAINABLE = ("synthesis", "superresolution", "decoder")
RNG_STREAMS = ("apt", "views", "gate")


@dataclass
class TrainConfig:
    epochs: int = 400
    lr: float = 2e-3
    apt_steps: int = 1
    ite_steps: int = 1
    trainable: tuple = DEFAULT_TRAINABLE
    seed: int = 0
    checkpoint_every: int = 25
    verify_isolation: bool = False
    inversion: InversionConfig = field(default_factory=InversionConfig)
    stylize: StylizeConfig = field(default_factory=StylizeConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if isinstance(self.inversion, dict):
            self.inversion = InversionConfig(**self.inversion)
        if isinstance(self.stylize, dict):
            self.stylize = StylizeConfig(**self.stylize)
        if isinstance(self.fusion, dict):
            self.fusion = FusionConfig(**self.fusion)
        self.trainable = tuple(self.trainable)
        self.validate()

    @property
    def batch_size(self) -> int:
        return self.stylize.batch_size

    def validate(self):
        for name in ("epochs", "apt_steps", "ite_steps"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"train.{name}: must be a positive integer, got {v}")
        if int(self.checkpoint_every) != self.checkpoint_every or self.checkpoint_every < 0:
            raise ConfigurationError(f"train.checkpoint_every: must be a non-negative integer, got {self.checkpoint_every}")
        if not self.lr > 0:
            raise ConfigurationError(f"train.lr: must be positive, got {self.lr}")
        unknown = set(self.trainable) - set(SUBMODULES)
        if unknown or not self.trainable:
            raise ConfigurationError(f"train.trainable: must be a non-empty subset of {SUBMODULES}, got {list(self.trainable)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        d["inversion"]["perturb_range_2d"] = self.inversion.perturb_range_2d.to_list()
        d["stylize"]["perturb_range_3d"] = self.stylize.perturb_range_3d.to_list()
        return d


@dataclass
class RunState:
    """Everything needed to continue a run bit-for-bit."""

    epoch: int
    w3d: LatentCode
    pose: CameraPose
    g_s: dict
    g_t: dict
    opt_s: dict
    opt_t: dict
    rng: dict
    apt_losses: list = field(default_factory=list)
    fusion: list = field(default_factory=list)
    config: dict = field(default_factory=dict)


class _Run:
    """Live modules and optimisers of one training run."""

    def __init__(self, cfg: TrainConfig, backends: Backends, state: RunState):
        self.cfg = cfg
        self.g_o = backends.g3d
        for p in self.g_o.parameters():
            p.requires_grad_(False)
        self.g_s = copy.deepcopy(self.g_o)
        self.g_t = copy.deepcopy(self.g_o)
        self.g_s.load_state_dict(state.g_s)
        self.g_t.load_state_dict(state.g_t)
        self.params_s = ParameterView(self.g_s, cfg.trainable)
        self.params_t = ParameterView(self.g_t, cfg.trainable)
        self.params_s.freeze_others(self.g_s)
        self.params_t.freeze_others(self.g_t)
        self.opt_s = torch.optim.Adam(list(self.params_s), lr=cfg.lr)
        self.opt_t = torch.optim.Adam(list(self.params_t), lr=cfg.lr)
        if state.opt_s:
            self.opt_s.load_state_dict(state.opt_s)
        if state.opt_t:
            self.opt_t.load_state_dict(state.opt_t)
        self.rng = {k: SeededRng.from_state(v) for k, v in state.rng.items()}
        self.embedder = backends.embedder
        self.oracle = backends.oracle
        self.delta_t = text_direction(backends.embedder, cfg.fusion.source_text, cfg.fusion.target_text)
        self.state = state

    def snapshot(self) -> RunState:
        s = self.state
        return RunState(
            epoch=s.epoch, w3d=s.w3d, pose=s.pose,
            g_s=copy.deepcopy(self.g_s.state_dict()), g_t=copy.deepcopy(self.g_t.state_dict()),
            opt_s=copy.deepcopy(self.opt_s.state_dict()), opt_t=copy.deepcopy(self.opt_t.state_dict()),
            rng={k: r.get_state() for k, r in self.rng.items()},
            apt_losses=list(s.apt_losses), fusion=list(s.fusion), config=s.config,
        )


def initial_state(cfg: TrainConfig, g3d_o: Generator3D, w3d: LatentCode, pose: CameraPose) -> RunState:
    """Fresh run state: both trained generators start as copies of ``g3d_o``."""
    root = SeededRng(cfg.seed, "train")
    sd = copy.deepcopy(g3d_o.state_dict())
    return RunState(
        epoch=0, w3d=w3d, pose=pose, g_s=sd, g_t=copy.deepcopy(sd), opt_s={}, opt_t={},
        rng={k: root.spawn(k).get_state() for k in RNG_STREAMS}, config=cfg.to_dict(),
    )


class IsolationError(AssertionError):
    """A stage changed parameters it does not own."""


def alternate_train(cfg: TrainConfig, backends: Backends, style_image: torch.Tensor, w3d: LatentCode,
                    pose: CameraPose, state: RunState | None = None, run_dir=None, callback=None):
    """Run (or continue) alternating training up to ``cfg.epochs``.

    Returns ``(RunState, g_s, g_t)``. With ``run_dir`` set, loss streams are
    appended under ``run_dir/train`` and checkpoints written every
    ``cfg.checkpoint_every`` epochs. ``callback(epoch, apt_losses, fusion_states)``
    is invoked after every epoch.
    """
    if state is None:
        state = initial_state(cfg, backends.g3d, w3d, pose)
    run = _Run(cfg, backends, state)
    g_o_hash = parameter_hash(run.g_o)
    style_image = style_image.unsqueeze(0) if style_image.ndim == 3 else style_image

    train_dir = None
    if run_dir is not None:
        train_dir = Path(run_dir) / "train"
        train_dir.mkdir(parents=True, exist_ok=True)
        _truncate_streams(train_dir, state)

    for epoch in range(state.epoch, int(cfg.epochs)):
        apt_records, fusion_records = [], []
        t_hash = parameter_hash(run.g_t) if cfg.verify_isolation else None
        for k in range(int(cfg.apt_steps)):
            samples = make_paired_batch(state.w3d, state.pose, run.rng["apt"], cfg.stylize, run.g_s)
            loss = apt_step(style_image, samples, run.g_s, run.oracle, run.opt_s, run.params_s,
                            loss=cfg.stylize.loss, step=epoch)
            apt_records.append({"epoch": epoch, "step": k, "loss": loss})
        if cfg.verify_isolation:
            s_hash = parameter_hash(run.g_s)
            if parameter_hash(run.g_t) != t_hash:
                raise IsolationError(f"paired-sample steps changed g_t at epoch {epoch}")
        for _ in range(int(cfg.ite_steps)):
            fs = ite_step(epoch, state.w3d, run.delta_t, cfg.fusion, run.rng["views"], run.rng["gate"],
                          run.g_s, run.g_t, run.g_o, run.embedder, run.opt_t, run.params_t)
            fusion_records.append(fs.to_record())
        if cfg.verify_isolation:
            if parameter_hash(run.g_s) != s_hash:
                raise IsolationError(f"fusion steps changed g_s at epoch {epoch}")
            if parameter_hash(run.g_o) != g_o_hash:
                raise IsolationError(f"frozen generator changed at epoch {epoch}")

        state.apt_losses.extend(apt_records)
        state.fusion.extend(fusion_records)
        state.epoch = epoch + 1
        if train_dir is not None:
            _append_jsonl(train_dir / "apt_loss.jsonl", apt_records)
            _append_jsonl(train_dir / "fusion_state.jsonl", fusion_records)
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(run.snapshot(), train_dir / "checkpoints" / f"epoch_{state.epoch:04d}")
        if callback is not None:
            callback(epoch, apt_records, fusion_records)

    if parameter_hash(run.g_o) != g_o_hash:
        raise IsolationError("frozen generator changed during training")
    return run.snapshot(), run.g_s, run.g_t


def _append_jsonl(path: Path, records):
    with open(path, "a", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")


def _truncate_streams(train_dir: Path, state: RunState):
    """Make the on-disk streams agree with ``state`` (drops records past a resume point)."""
    for name, records in (("apt_loss.jsonl", state.apt_losses), ("fusion_state.jsonl", state.fusion)):
        path = train_dir / name
        with open(path, "w", encoding="utf-8") as f:
            for r in records:
                f.write(json.dumps(r) + "\n")


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: RunState, directory) -> Path:
    """Write ``state.pt`` and ``meta.json`` atomically (temp directory, then rename)."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = directory.with_name(directory.name + f".tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    tensors = {
        "w3d": torch.from_numpy(state.w3d.values.copy()),
        "pose": state.pose.tensor(),
        "g_s": state.g_s, "g_t": state.g_t, "opt_s": state.opt_s, "opt_t": state.opt_t,
    }
    torch.save(tensors, tmp / "state.pt")
    digest = hashlib.sha256((tmp / "state.pt").read_bytes()).hexdigest()
    meta = {
        "format_version": CHECKPOINT_FORMAT, "epoch": state.epoch, "state_sha256": digest,
        "rng": state.rng, "apt_losses": state.apt_losses, "fusion": state.fusion, "config": state.config,
    }
    (tmp / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)
    return directory


def load_checkpoint(directory) -> RunState:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        blob = (directory / "state.pt").read_bytes()
    except (OSError, ValueError) as exc:
        raise IncompatibleCheckpointError(f"cannot read checkpoint at {directory}: {exc}") from None
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpointError(
            f"checkpoint format {meta.get('format_version')!r} is not supported (expected {CHECKPOINT_FORMAT})")
    if hashlib.sha256(blob).hexdigest() != meta.get("state_sha256"):
        raise IncompatibleCheckpointError(f"checkpoint at {directory} is corrupted (digest mismatch)")
    try:
        tensors = torch.load(directory / "state.pt", weights_only=True)
        return RunState(
            epoch=int(meta["epoch"]), w3d=LatentCode(tensors["w3d"].numpy()),
            pose=CameraPose.from_vector(tensors["pose"].numpy()),
            g_s=tensors["g_s"], g_t=tensors["g_t"], opt_s=tensors["opt_s"], opt_t=tensors["opt_t"],
            rng=meta["rng"], apt_losses=meta["apt_losses"], fusion=meta["fusion"], config=meta["config"],
        )
    except Exception as exc:  # any decoding failure means the file is unusable
        raise IncompatibleCheckpointError(f"cannot decode checkpoint at {directory}: {exc}") from None


def latest_checkpoint(checkpoint_root) -> Path | None:
    root = Path(checkpoint_root)
    if not root.is_dir():
        return None
    found = sorted(p for p in root.glob("epoch_[0-9][0-9][0-9][0-9]") if p.is_dir())
    return found[-1] if found else None


def generator_from_state(g3d_o: Generator3D, state_dict: dict) -> Generator3D:
    g = copy.deepcopy(g3d_o)
    g.load_state_dict(state_dict)
    for p in g.parameters():
        p.requires_grad_(False)
    return g


# -- pivot tuning -------------------------------------------------------------

@dataclass
class PivotResult:
    generator: Generator3D
    inversion: InversionResult
    stage1_mse: float
    stage2_mse: float
    param_delta: float
    losses: list


def pti_invert_edit(target_image: torch.Tensor, init_pose: CameraPose, backends: Backends,
                    inversion: InversionConfig | None = None, steps: int = 200, lr: float = 0.05,
                    trainable=DEFAULT_TRAINABLE, loss: str = "lpips") -> PivotResult:
    """Invert to a pivot, then fine-tune a copy of the generator at that pivot.

    Stage 2 uses plain gradient descent: the update is proportional to the
    remaining error, so a target the generator already reproduces barely
    moves it. The returned generator can seed ``g_t`` for text editing.
    """
    inversion = inversion or InversionConfig()
    target = target_image.unsqueeze(0) if target_image.ndim == 3 else target_image
    g0 = backends.g3d
    res = invert_artistic(target, init_pose, inversion, g0, backends.oracle)
    g = copy.deepcopy(g0)
    params = ParameterView(g, trainable)
    params.freeze_others(g)
    sample = PairedSample(res.w3d, res.pose, None)
    with torch.no_grad():
        stage1 = float(((g(res.w3d, res.pose) - target) ** 2).mean())
    opt = torch.optim.SGD(list(params), lr=lr)
    losses = []
    for step in range(int(steps)):
        losses.append(apt_step(target, [sample], g, backends.oracle, opt, params, loss=loss, step=step))
    with torch.no_grad():
        stage2 = float(((g(res.w3d, res.pose) - target) ** 2).mean())
        before = dict(g0.named_parameters())
        delta = math.sqrt(sum(float(((p - before[n]) ** 2).sum()) for n, p in g.named_parameters()))
    for p in g.parameters():
        p.requires_grad_(False)
    return PivotResult(g, res, stage1, stage2, delta, losses)


def moving_average(values, window: int):
    if len(values) < window:
        raise ValueError(f"need at least {window} values, got {len(values)}")
    return [sum(values[i:i + window]) / window for i in range(len(values) - window + 1)]


__all__ = [
    "TrainConfig", "RunState", "alternate_train", "initial_state", "save_checkpoint", "load_checkpoint",
    "latest_checkpoint", "generator_from_state", "pti_invert_edit", "PivotResult", "IsolationError",
    "moving_average",
]
