"""Image-text fusion in a joint embedding space with a threshold gate.

Three directions share an origin at the source render's embedding:
ΔI points to the image-stylised render, ΔT from the source text to the target
text, and ΔIT to the render being trained. The trained render follows ΔI or
ΔT depending on a gate: once the image style has moved far enough from the
source (distance D above ``tau``), a coin with bias ``xi``/100 picks the text
branch; otherwise the text branch is always used.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from .backends.base import Generator3D, JointEmbedder, ParameterView
from .errors import ConfigurationError, DegenerateDirectionError, DimensionError, DivergenceError
from .latent import LatentCode, SeededRng, canonical_pose, sample_multiview_poses

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-8
DISTANCES = ("l2", "cosine")


@dataclass
class FusionConfig:
    tau: float = 0.7
    xi: int = 50
    target_text: str = "a portrait, wearing glasses"
    source_text: str = "photo"
    n_views: int = 3
    yaw_range: tuple = (-50.0, 50.0)
    pitch_range: tuple = (-30.0, 30.0)
    distance: str = "l2"

    def __post_init__(self):
        self.yaw_range = tuple(float(v) for v in self.yaw_range)
        self.pitch_range = tuple(float(v) for v in self.pitch_range)
        self.validate()

    def validate(self):
        if not 0.0 < self.tau < 2.0:
            raise ConfigurationError(f"fusion.tau: must be in (0, 2), got {self.tau}")
        if int(self.xi) != self.xi or not 1 <= self.xi <= 100:
            raise ConfigurationError(f"fusion.xi: must be an integer in [1, 100], got {self.xi}")
        if int(self.n_views) != self.n_views or self.n_views < 1:
            raise ConfigurationError(f"fusion.n_views: must be a positive integer, got {self.n_views}")
        if self.distance not in DISTANCES:
            raise ConfigurationError(f"fusion.distance: must be one of {DISTANCES}, got {self.distance!r}")
        for name in ("yaw_range", "pitch_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"fusion.{name}: low end {lo} exceeds high end {hi}")
        if not self.target_text.strip():
            raise ConfigurationError("fusion.target_text: must not be empty")


@dataclass
class FusionState:
    """What happened in one fusion step; serialised one record per line."""

    epoch: int
    D: float
    draw: int | None
    gamma: int
    L_I: float | None
    L_T: float | None
    L_IT: float | None
    skipped: bool = False
    poses: list = field(default_factory=list)

    def to_record(self) -> dict:
        return asdict(self)

    @classmethod
    def from_record(cls, rec: dict) -> "FusionState":
        return cls(**rec)


@dataclass
class Views:
    poses: list
    style: torch.Tensor
    train: torch.Tensor
    source: torch.Tensor


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"embedding widths differ: {a.shape[-1]} vs {b.shape[-1]}")


def direction(from_emb: torch.Tensor, to_emb: torch.Tensor) -> torch.Tensor:
    """The unnormalised difference ``to_emb - from_emb``."""
    _check_pair(from_emb, to_emb)
    return to_emb - from_emb


def cosine_direction_loss(d1: torch.Tensor, d2: torch.Tensor) -> torch.Tensor:
    """``1 - cos(d1, d2)`` along the last axis.

    Raises ``DegenerateDirectionError`` when any direction is shorter than
    1e-8, where the cosine is undefined.
    """
    _check_pair(d1, d2)
    n1 = d1.norm(dim=-1)
    n2 = d2.norm(dim=-1)
    if bool((n1 < DEGENERATE_NORM).any()) or bool((n2 < DEGENERATE_NORM).any()):
        raise DegenerateDirectionError("direction norm below 1e-8; cosine undefined")
    return 1.0 - (d1 * d2).sum(dim=-1) / (n1 * n2)


def text_direction(embedder: JointEmbedder, source_text: str, target_text: str) -> torch.Tensor:
    with torch.no_grad():
        return direction(embedder.encode_text(source_text), embedder.encode_text(target_text))


def build_views(w3d: LatentCode, rng: SeededRng, cfg: FusionConfig, g_s: Generator3D, g_t: Generator3D,
                g_o: Generator3D) -> Views:
    """Render pose-matched style/train views and the canonical source view.

    Only the ``train`` batch carries gradients (into ``g_t``).
    """
    poses = sample_multiview_poses(rng, int(cfg.n_views), cfg.yaw_range, cfg.pitch_range)
    pose_batch = torch.stack([p.tensor() for p in poses])
    w = w3d.tensor().unsqueeze(0)
    with torch.no_grad():
        style = g_s(w, pose_batch)
        source = g_o(w, canonical_pose()).expand(len(poses), -1, -1, -1)
    train = g_t(w, pose_batch)
    return Views(poses, style, train, source)


def stylization_distance(style_embs: torch.Tensor, source_embs: torch.Tensor, kind: str = "l2") -> float:
    """Mean over views of the distance between paired unit embeddings."""
    if len(style_embs) == 0 or len(source_embs) == 0:
        raise ConfigurationError("stylization distance needs at least one view")
    if len(style_embs) != len(source_embs):
        raise DimensionError(f"{len(style_embs)} style views vs {len(source_embs)} source views")
    s = torch.as_tensor(style_embs, dtype=torch.float64)
    o = torch.as_tensor(source_embs, dtype=torch.float64)
    _check_pair(s, o)
    if kind == "l2":
        d = (s - o).norm(dim=-1)
    elif kind == "cosine":
        d = 1.0 - F.cosine_similarity(s, o, dim=-1)
    else:
        raise ConfigurationError(f"unknown stylization distance {kind!r}")
    return float(d.mean())


def select_gamma(D: float, rng: SeededRng, cfg: FusionConfig) -> tuple[int, int | None]:
    """The gate. Returns ``(gamma, draw)``; ``draw`` is None when no draw was needed."""
    if D <= cfg.tau:
        return 0, None
    draw = int(rng.integers(1, 100))
    return (0 if draw <= cfg.xi else 1), draw


def branch_losses(views: Views, delta_t: torch.Tensor, embedder: JointEmbedder):
    """Per-branch losses (each averaged over views) and the distance inputs.

    Returns ``(L_I, L_T, e_style, e_source)``; a branch whose directions are
    degenerate is returned as None.
    """
    e_style = embedder.encode_image(views.style)
    e_source = embedder.encode_image(views.source)
    e_train = embedder.encode_image(views.train)
    d_i = direction(e_source, e_style)
    d_it = direction(e_source, e_train)
    out = []
    for target in (d_i, delta_t.expand_as(d_it)):
        try:
            out.append(cosine_direction_loss(d_it, target).mean())
        except DegenerateDirectionError:
            out.append(None)
    return out[0], out[1], e_style.detach(), e_source.detach()


def ite_loss(views: Views, delta_t: torch.Tensor, gamma: int, embedder: JointEmbedder):
    """``gamma * L_I + (1 - gamma) * L_T`` as a differentiable scalar.

    Returns ``(L_IT, L_I, L_T)`` with the branch losses as floats. Raises
    ``DegenerateDirectionError`` when the selected branch is undefined.
    """
    if gamma not in (0, 1):
        raise ValueError(f"gamma must be 0 or 1, got {gamma}")
    l_i, l_t, _, _ = branch_losses(views, delta_t, embedder)
    chosen = l_i if gamma == 1 else l_t
    if chosen is None:
        raise DegenerateDirectionError("selected fusion branch has a degenerate direction")
    return chosen, _scalar(l_i), _scalar(l_t)


def _scalar(t):
    return None if t is None else float(t.detach())


def ite_step(epoch: int, w3d: LatentCode, delta_t: torch.Tensor, cfg: FusionConfig, rng_views: SeededRng,
             rng_gate: SeededRng, g_s: Generator3D, g_t: Generator3D, g_o: Generator3D, embedder: JointEmbedder,
             optimizer: torch.optim.Optimizer, params: ParameterView) -> FusionState:
    """Render views, gate, and take one optimiser step on ``g_t``.

    When the selected direction is degenerate the step is skipped and the
    state says so; no loss is fabricated.
    """
    views = build_views(w3d, rng_views, cfg, g_s, g_t, g_o)
    l_i, l_t, e_style, e_source = branch_losses(views, delta_t, embedder)
    D = stylization_distance(e_style, e_source, cfg.distance)
    gamma, draw = select_gamma(D, rng_gate, cfg)
    chosen = l_i if gamma == 1 else l_t
    poses = [[p.yaw, p.pitch] for p in views.poses]
    state = FusionState(epoch, D, draw, gamma, _scalar(l_i), _scalar(l_t), _scalar(chosen), chosen is None, poses)
    if chosen is None:
        log.info("fusion step %d skipped: degenerate direction", epoch)
        return state
    if not math.isfinite(state.L_IT):
        raise DivergenceError(f"fusion loss became non-finite at epoch {epoch}", stage="ite", step=epoch)
    plist = list(params)
    grads = torch.autograd.grad(chosen, plist, allow_unused=True)
    for p, g in zip(plist, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return state
