"""Artistic GAN inversion with a camera initialised from an aligned photograph.

The artistic image's camera is hard to estimate directly, so the 2D inversion
latent of the style image has its fine layers blended with mapped noise, the
resulting photo-domain render is fed to an off-the-shelf estimator, and the
estimate seeds a joint optimisation of the 3D latent and the camera.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch

from .backends.base import Generator2D, Generator3D, PerceptualOracle, PoseEstimator
from .errors import ConfigurationError, DimensionError, DivergenceError
from .latent import CameraPose, LatentCode, LayerRange, SeededRng, mix_latent, pose_vector

log = logging.getLogger(__name__)

LOSS_TERMS = ("l2", "lpips", "id", "depth")
MAX_PITCH = math.radians(85.0)


@dataclass
class InversionConfig:
    alpha: float = 0.2
    perturb_range_2d: LayerRange = field(default_factory=lambda: LayerRange(13, 18))
    steps: int = 500
    lr: float = 0.01
    weights: dict = field(default_factory=lambda: {"l2": 1.0, "lpips": 0.8, "id": 0.1, "depth": 1.0})
    pose_init: bool = True
    random_yaw_range: tuple = (-50.0, 50.0)
    random_pitch_range: tuple = (-30.0, 30.0)

    def __post_init__(self):
        self.perturb_range_2d = LayerRange.parse(self.perturb_range_2d)
        self.random_yaw_range = tuple(self.random_yaw_range)
        self.random_pitch_range = tuple(self.random_pitch_range)
        self.validate()

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"inversion.alpha: must be in [0, 1], got {self.alpha}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigurationError(f"inversion.steps: must be a positive integer, got {self.steps}")
        if not self.lr > 0:
            raise ConfigurationError(f"inversion.lr: must be positive, got {self.lr}")
        unknown = set(self.weights) - set(LOSS_TERMS)
        if unknown:
            raise ConfigurationError(f"inversion.weights: unknown terms {sorted(unknown)}")
        for k, v in self.weights.items():
            if v < 0:
                raise ConfigurationError(f"inversion.weights.{k}: must be >= 0, got {v}")


@dataclass
class InversionResult:
    w3d: LatentCode
    pose: CameraPose
    losses: dict
    steps: int
    init_pose: CameraPose | None = None
    history: list = field(default_factory=list)

    @property
    def loss(self) -> float:
        return self.losses["total"]


def composite_inversion_loss(gen: torch.Tensor, target: torch.Tensor, oracle: PerceptualOracle, weights: dict):
    """Weighted sum of pixel, perceptual, identity and depth terms.

    Returns ``(total, terms)`` where ``total`` is a differentiable scalar and
    ``terms`` maps each unweighted term to a float (plus ``"total"``).
    """
    if gen.shape != target.shape:
        raise DimensionError(f"generated {tuple(gen.shape)} and target {tuple(target.shape)} differ in shape")
    values = {}
    total = gen.new_zeros(())
    for name in LOSS_TERMS:
        wt = weights.get(name, 0.0)
        if name == "l2":
            term = oracle.pixel_l2(gen, target).mean()
        elif name == "lpips":
            term = oracle.perceptual(gen, target).mean()
        elif name == "id":
            term = (1.0 - oracle.identity(gen, target)).mean()
        else:
            term = ((oracle.depth(gen) - oracle.depth(target)) ** 2).mean()
        values[name] = float(term.detach())
        if wt:
            total = total + wt * term
    values["total"] = float(total.detach())
    return total, values


def init_pose_from_photo(style_image, w2d: LatentCode, rng: SeededRng, cfg: InversionConfig,
                         g2d: Generator2D, est: PoseEstimator) -> CameraPose:
    """Camera of the style image, read off an aligned photo-domain render.

    Raises whatever the estimator raises (``PoseEstimationError``) when the
    render cannot be posed.
    """
    noise = g2d.mapped_noise(rng)
    w_mixed = mix_latent(w2d, noise, cfg.alpha, cfg.perturb_range_2d)
    with torch.no_grad():
        photo = g2d(w_mixed)
    return est(photo)


def random_pose(rng: SeededRng, yaw_range=(-50.0, 50.0), pitch_range=(-30.0, 30.0)) -> CameraPose:
    return CameraPose.from_angles(float(rng.uniform(*yaw_range)), float(rng.uniform(*pitch_range)))


def invert_artistic(style_image, init_pose: CameraPose, cfg: InversionConfig, g3d: Generator3D,
                    oracle: PerceptualOracle, w_init: LatentCode | None = None) -> InversionResult:
    """Jointly fit a 3D latent and camera (yaw, pitch) to ``style_image``.

    The generator is only read: gradients are taken with respect to the
    latent and the angles alone, so its parameters are untouched. The
    lowest-loss iterate seen (including the final one) is returned.
    """
    target = style_image.detach()
    if target.ndim == 3:
        target = target.unsqueeze(0)
    w0 = w_init if w_init is not None else g3d.mean_latent()
    w = w0.tensor().unsqueeze(0).requires_grad_(True)
    yaw = torch.tensor(math.radians(init_pose.yaw), dtype=torch.float64, requires_grad=True)
    pitch = torch.tensor(math.radians(init_pose.pitch), dtype=torch.float64, requires_grad=True)
    params = [w, yaw, pitch]
    opt = torch.optim.Adam(params, lr=cfg.lr)

    def evaluate():
        img = g3d(w, pose_vector(yaw, pitch))
        return composite_inversion_loss(img, target, oracle, cfg.weights)

    best = None
    history = []

    def consider(step, terms):
        nonlocal best
        if best is None or terms["total"] < best[0]["total"]:
            best = (terms, w.detach().clone(), yaw.item(), pitch.item())
        history.append({"step": step, **terms, "best": best[0]["total"],
                        "yaw": math.degrees(yaw.item()), "pitch": math.degrees(pitch.item())})

    for step in range(int(cfg.steps)):
        total, terms = evaluate()
        if not math.isfinite(terms["total"]):
            raise DivergenceError(f"inversion loss became non-finite at step {step}", stage="inversion", step=step)
        consider(step, terms)
        grads = torch.autograd.grad(total, params)
        for p, g in zip(params, grads):
            p.grad = g
        opt.step()
        with torch.no_grad():
            pitch.clamp_(-MAX_PITCH, MAX_PITCH)

    with torch.no_grad():
        _, terms = evaluate()
    if not math.isfinite(terms["total"]):
        raise DivergenceError(f"inversion loss became non-finite at step {cfg.steps}", stage="inversion",
                              step=int(cfg.steps))
    consider(int(cfg.steps), terms)

    terms, w_best, yaw_best, pitch_best = best
    return InversionResult(
        w3d=LatentCode.from_tensor(w_best),
        pose=CameraPose.from_angles(math.degrees(yaw_best), math.degrees(pitch_best)),
        losses=dict(terms),
        steps=int(cfg.steps),
        init_pose=init_pose,
        history=history,
    )
