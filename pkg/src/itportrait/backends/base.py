"""Interfaces for the pretrained components the pipeline relies on.

Images are ``torch.float64`` tensors shaped ``(batch, 3, height, width)`` with
values in ``[0, 1]``. Latents passed to generators are ``(batch, layers,
width)`` tensors; poses are ``(batch, 25)`` tensors in the layout described in
:mod:`itportrait.latent`.
"""

from __future__ import annotations

import abc
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import ConfigurationError, DimensionError
from ..latent import CameraPose, LatentCode, SeededRng

SUBMODULES = ("synthesis", "mapping", "superresolution", "decoder")


def _as_latent_batch(w, layers: int) -> torch.Tensor:
    if isinstance(w, LatentCode):
        w = w.tensor()
    if w.ndim == 2:
        w = w.unsqueeze(0)
    if w.ndim != 3 or w.shape[1] != layers:
        raise DimensionError(f"expected a latent with {layers} layers, got shape {tuple(w.shape)}")
    return w


def _as_pose_batch(p, batch: int) -> torch.Tensor:
    if isinstance(p, CameraPose):
        p = p.tensor()
    if p.ndim == 1:
        p = p.unsqueeze(0)
    if p.shape[-1] != 25:
        raise DimensionError(f"expected 25-component poses, got shape {tuple(p.shape)}")
    if p.shape[0] == 1 and batch > 1:
        p = p.expand(batch, 25)
    return p


class Generator3D(nn.Module):
    """A pose-conditioned generator with four named parameter groups.

    Subclasses implement ``render(w, pose)`` on batched tensors and expose the
    submodules ``synthesis``, ``mapping``, ``superresolution`` and ``decoder``
    as attributes.
    """

    num_layers: int = 14
    width: int = 512
    resolution: int = 64

    def render(self, w: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, w, pose) -> torch.Tensor:
        w = _as_latent_batch(w, self.num_layers)
        pose = _as_pose_batch(pose, w.shape[0])
        if w.shape[0] == 1 and pose.shape[0] > 1:
            w = w.expand(pose.shape[0], -1, -1)
        if w.shape[0] != pose.shape[0]:
            raise DimensionError(f"latent batch {w.shape[0]} does not match pose batch {pose.shape[0]}")
        return self.render(w, pose)

    def map(self, z: torch.Tensor) -> torch.Tensor:
        """Noise ``(batch, width)`` to a single style vector per sample."""
        return self.mapping(z)

    def submodule(self, name: str) -> nn.Module:
        if name not in SUBMODULES:
            raise ConfigurationError(f"unknown generator submodule {name!r}; expected one of {SUBMODULES}")
        return getattr(self, name)

    def mapped_noise(self, rng: SeededRng) -> LatentCode:
        z = torch.tensor(rng.normal(self.width), dtype=torch.float64).unsqueeze(0)
        with torch.no_grad():
            w = self.map(z)[0]
        return LatentCode.broadcast(w.numpy(), self.num_layers)

    def mean_latent(self, n: int = 10_000, seed: int = 0) -> LatentCode:
        cache = getattr(self, "_mean_latent_cache", None)
        if cache is not None and cache[0] == (n, seed):
            return cache[1]
        rng = SeededRng(seed, "mean-latent")
        z = torch.tensor(rng.normal((n, self.width)), dtype=torch.float64)
        with torch.no_grad():
            w = self.map(z).mean(dim=0)
        out = LatentCode.broadcast(w.numpy(), self.num_layers)
        self._mean_latent_cache = ((n, seed), out)
        return out


class Generator2D(nn.Module):
    """A pose-free 2D generator; pose is carried implicitly by the latent."""

    num_layers: int = 18
    width: int = 512
    resolution: int = 64

    def render(self, w: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, w) -> torch.Tensor:
        return self.render(_as_latent_batch(w, self.num_layers))

    def map(self, z: torch.Tensor) -> torch.Tensor:
        return self.mapping(z)

    def mapped_noise(self, rng: SeededRng) -> LatentCode:
        z = torch.tensor(rng.normal(self.width), dtype=torch.float64).unsqueeze(0)
        with torch.no_grad():
            w = self.map(z)[0]
        return LatentCode.broadcast(w.numpy(), self.num_layers)


class JointEmbedder(nn.Module):
    """Frozen image and text encoders into one unit-norm embedding space."""

    embed_dim: int = 512

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, text) -> torch.Tensor:
        raise NotImplementedError


class PoseEstimator(abc.ABC):
    @abc.abstractmethod
    def __call__(self, image: torch.Tensor) -> CameraPose:
        """Estimate the camera of a single image; raise ``PoseEstimationError`` on failure."""


class Inverter2D(abc.ABC):
    @abc.abstractmethod
    def invert(self, image: torch.Tensor) -> LatentCode:
        """Map an image to a latent of the 2D generator whose render is aligned with it."""


class PerceptualOracle(abc.ABC):
    """Pairwise image distances used by the inversion and stylisation losses.

    All distances return one value per batch element.
    """

    def pixel_l2(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return ((a - b) ** 2).flatten(1).mean(dim=1)

    @abc.abstractmethod
    def perceptual(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        ...

    @abc.abstractmethod
    def identity(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Similarity in ``[-1, 1]``; 1 for identical images."""

    @abc.abstractmethod
    def depth(self, images: torch.Tensor) -> torch.Tensor:
        ...


@dataclass
class Backends:
    """The set of pretrained components a run needs."""

    g3d: Generator3D
    g2d: Generator2D
    embedder: JointEmbedder
    estimator: PoseEstimator
    oracle: PerceptualOracle
    inverter2d: Inverter2D | None = None


class ParameterView:
    """Named parameters of selected generator submodules."""

    def __init__(self, generator: Generator3D, names):
        names = set(names)
        unknown = names - set(SUBMODULES)
        if unknown:
            raise ConfigurationError(f"unknown generator submodules {sorted(unknown)}; expected a subset of {SUBMODULES}")
        self.names = frozenset(names)
        self.named = [(f"{n}.{pn}", p) for n in SUBMODULES if n in names
                      for pn, p in generator.submodule(n).named_parameters()]

    def __iter__(self):
        return (p for _, p in self.named)

    def __len__(self):
        return len(self.named)

    def freeze_others(self, generator: Generator3D) -> None:
        """Set ``requires_grad`` so only the selected parameters are trainable."""
        for n in SUBMODULES:
            for p in generator.submodule(n).parameters():
                p.requires_grad_(n in self.names)


def select_submodule_params(generator: Generator3D, names) -> ParameterView:
    return ParameterView(generator, names)


def parameter_hash(module: nn.Module, names=None) -> str:
    """SHA-256 over the raw bytes of a module's parameters and buffers."""
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        if names is not None and key.split(".", 1)[0] not in names:
            continue
        h.update(key.encode())
        h.update(np.ascontiguousarray(state[key].detach().cpu().numpy()).tobytes())
    return h.hexdigest()
