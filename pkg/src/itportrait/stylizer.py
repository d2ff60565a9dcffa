"""One-shot stylisation of the 3D generator from paired samples.

Fine layers of the inverted latent are blended with fresh mapped noise, the
stylised generator renders the blend at the inverted camera, and that render
is pulled towards the style image. Redrawing the noise every step spreads the
style over a neighbourhood of the latent instead of a single point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .backends.base import Generator3D, ParameterView, PerceptualOracle
from .errors import ConfigurationError, DivergenceError
from .latent import CameraPose, LatentCode, LayerRange, SeededRng, mix_latent

APT_LOSSES = ("lpips", "l2")


@dataclass
class StylizeConfig:
    beta: float = 0.1
    beta_range: tuple | None = None
    perturb_range_3d: LayerRange = field(default_factory=lambda: LayerRange(9, 13))
    batch_size: int = 2
    loss: str = "lpips"

    def __post_init__(self):
        self.perturb_range_3d = LayerRange.parse(self.perturb_range_3d)
        if self.beta_range is not None:
            self.beta_range = tuple(float(b) for b in self.beta_range)
        self.validate()

    def validate(self, layers: int = 14):
        if not 0.0 <= self.beta <= 0.2:
            raise ConfigurationError(f"stylize.beta: must be in [0, 0.2], got {self.beta}")
        if self.beta_range is not None:
            lo, hi = self.beta_range
            if not 0.0 <= lo <= hi <= 0.2:
                raise ConfigurationError(f"stylize.beta_range: must satisfy 0 <= lo <= hi <= 0.2, got {self.beta_range}")
        try:
            self.perturb_range_3d.check(layers)
        except ValueError as exc:
            raise ConfigurationError(f"stylize.perturb_range_3d: {exc}") from None
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigurationError(f"stylize.batch_size: must be a positive integer, got {self.batch_size}")
        if self.loss not in APT_LOSSES:
            raise ConfigurationError(f"stylize.loss: must be one of {APT_LOSSES}, got {self.loss!r}")

    def draw_beta(self, rng: SeededRng) -> float:
        if self.beta_range is None:
            return self.beta
        return float(rng.uniform(*self.beta_range))


@dataclass
class PairedSample:
    latent: LatentCode
    pose: CameraPose
    image: torch.Tensor


def make_paired_sample(w3d: LatentCode, pose: CameraPose, rng: SeededRng, cfg: StylizeConfig,
                       g3d_s: Generator3D, beta: float | None = None) -> PairedSample:
    """Perturb the fine layers of ``w3d`` with mapped noise and render at ``pose``.

    ``beta`` overrides the configured blend weight; it is not range-checked so
    tests can use the degenerate weight 1.
    """
    weight = cfg.draw_beta(rng) if beta is None else float(beta)
    noise = g3d_s.mapped_noise(rng)
    mixed = mix_latent(w3d, noise, weight, cfg.perturb_range_3d)
    with torch.no_grad():
        image = g3d_s(mixed, pose)
    return PairedSample(mixed, pose, image)


def make_paired_batch(w3d: LatentCode, pose: CameraPose, rng: SeededRng, cfg: StylizeConfig,
                      g3d_s: Generator3D) -> list[PairedSample]:
    return [make_paired_sample(w3d, pose, rng, cfg, g3d_s) for _ in range(int(cfg.batch_size))]


def apt_loss(style_image: torch.Tensor, images: torch.Tensor, oracle: PerceptualOracle, kind: str = "lpips"):
    target = style_image.expand_as(images) if style_image.shape[0] == 1 else style_image
    if kind == "lpips":
        return oracle.perceptual(images, target).mean()
    return oracle.pixel_l2(images, target).mean()


def apt_step(style_image: torch.Tensor, samples, g3d_s: Generator3D, oracle: PerceptualOracle,
             optimizer: torch.optim.Optimizer, params: ParameterView, loss: str = "lpips",
             step: int | None = None) -> float:
    """One optimiser step pulling the paired renders towards the style image.

    Only the parameters in ``params`` receive gradients. Returns the loss
    before the update.
    """
    if isinstance(samples, PairedSample):
        samples = [samples]
    latents = torch.stack([s.latent.tensor() for s in samples])
    poses = torch.stack([s.pose.tensor() for s in samples])
    if style_image.ndim == 3:
        style_image = style_image.unsqueeze(0)
    value = apt_loss(style_image.detach(), g3d_s(latents, poses), oracle, loss)
    pre = float(value.detach())
    if not math.isfinite(pre):
        raise DivergenceError(f"paired-sample loss became non-finite at step {step}", stage="apt", step=step)
    plist = list(params)
    grads = torch.autograd.grad(value, plist, allow_unused=True)
    for p, g in zip(plist, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return pre
