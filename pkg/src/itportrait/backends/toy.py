"""A small, deterministic, differentiable stand-in for the pretrained models.

The toy "portrait" is a soft elliptical head on a flat background. The head
outline moves and foreshortens with yaw/pitch, and the face texture slides
inside the outline (a cheap parallax). Face texture is a fixed bank of smooth
basis patterns whose coefficients come from the latent layers.

Two details make camera recovery behave like it does for a real 3D GAN:

* fine "strand" gratings that slide quickly with the camera and that no
  latent can reproduce, so a wrong camera leaves a residual that the
  optimiser cannot remove; and
* a head displacement driven by the difference between the first two latent
  layers. It is zero for every mapped latent, but a W+ code can use it to
  drag the outline to where the target has it, so an inversion started from
  a badly wrong camera settles on a wrong view instead of recovering.

Renders of the 2D generator keep the face's blue channel at a constant
``SKIN_BLUE``; the toy pose estimator relies on that to read the head outline,
so it only works on those aligned photographs, much like a real landmark-based
estimator that fails on drawings.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import DimensionError, PoseEstimationError, VocabularyError
from ..latent import CameraPose, LatentCode, SeededRng, pose_angles
from .base import Backends, Generator2D, Generator3D, Inverter2D, JointEmbedder, PerceptualOracle, PoseEstimator

DTYPE = torch.float64

BG_COLOR = (0.95, 0.95, 0.95)
SKIN_BLUE = 0.3
HEAD_SHIFT = 0.4
HEAD_HALF_WIDTH = 0.45
HEAD_HALF_HEIGHT = 0.55
MASK_SHARPNESS = 12.0
PARALLAX = 0.35
N_FEATURES = 8
STYLE_DIM = 4
RBF_GRID = 6
RBF_SIGMA = 0.25
SINE_FREQS = (4.0, 7.0)
N_BASIS = RBF_GRID * RBF_GRID + 4 * len(SINE_FREQS)

OFFSET_RANGE = 0.6
OFFSET_SCALE = 8.0
STRAND_COUNT = 32
STRAND_FREQ_RANGE = (3.0, 8.0)
STRAND_PARALLAX = 8.0
STRAND_GAIN = 2.0

EMBED_POOL = 16
YAW_SPAN_DEG = 80.0
PITCH_SPAN_DEG = 60.0
COARSE_LAYERS_2D = 4

VOCAB = (
    "photo a an the of with and in portrait face person man woman child wearing glasses hat beard "
    "smile smiling old young elderly zombie vampire elf pixar disney cartoon anime sketch pencil "
    "painting oil watercolor comic caricature statue marble bronze golden red blue green purple "
    "hair eyes makeup tattoo mask neon cyberpunk gothic style drawing art artistic fantasy "
    "werewolf clown robot"
).split()


def _randn(gen: torch.Generator, *shape, std=1.0):
    return torch.randn(*shape, generator=gen, dtype=DTYPE) * std


def _logit(p):
    return math.log(p / (1.0 - p))


def pixel_grid(resolution: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel-centre coordinates in ``[-1, 1]``; ``y`` grows downwards."""
    c = (torch.arange(resolution, dtype=DTYPE) * 2 + 1) / resolution - 1
    y, x = torch.meshgrid(c, c, indexing="ij")
    return x.contiguous(), y.contiguous()


def head_geometry(x, y, yaw, pitch, offset=None):
    """Head mask and texture coordinates for batched yaw/pitch (radians).

    ``offset`` is an optional ``(batch, 2)`` displacement of the head centre.
    Returns ``mask, ut, vt`` each shaped ``(batch, H, W)``.
    """
    yaw = yaw[:, None, None]
    pitch = pitch[:, None, None]
    sy, sp = torch.sin(yaw), torch.sin(pitch)
    cx, cy = HEAD_SHIFT * sy, HEAD_SHIFT * sp
    if offset is not None:
        cx = cx + offset[:, 0, None, None]
        cy = cy + offset[:, 1, None, None]
    a = HEAD_HALF_WIDTH * (0.8 + 0.2 * torch.cos(yaw))
    b = HEAD_HALF_HEIGHT * (0.85 + 0.15 * torch.cos(pitch))
    u = (x - cx) / a
    v = (y - cy) / b
    mask = torch.sigmoid(MASK_SHARPNESS * (1.0 - u * u - v * v))
    return mask, u + PARALLAX * sy, v + PARALLAX * sp


class _BasisBank(nn.Module):
    def __init__(self):
        super().__init__()
        self.register_buffer("centers", torch.linspace(-1.0, 1.0, RBF_GRID, dtype=DTYPE))
        self.register_buffer("freqs", torch.tensor(SINE_FREQS, dtype=DTYPE))

    def forward(self, ut, vt):
        # (B, H, W) -> (B, H*W, K); the Gaussian bumps are separable in u and v
        u = ut.flatten(1)[..., None]
        v = vt.flatten(1)[..., None]
        gu = torch.exp(-((u - self.centers) ** 2) / (2 * RBF_SIGMA ** 2))
        gv = torch.exp(-((v - self.centers) ** 2) / (2 * RBF_SIGMA ** 2))
        rbf = (gv[..., :, None] * gu[..., None, :]).flatten(2)
        fu, fv = u * self.freqs, v * self.freqs
        return torch.cat([rbf, torch.cos(fu), torch.sin(fu), torch.cos(fv), torch.sin(fv)], dim=-1)


class ToyMapping(nn.Module):
    def __init__(self, width: int, gen: torch.Generator):
        super().__init__()
        self.fc1 = nn.Linear(width, width).to(DTYPE)
        self.fc2 = nn.Linear(width, width).to(DTYPE)
        with torch.no_grad():
            self.fc1.weight.copy_(_randn(gen, width, width, std=math.sqrt(2.0 / width)))
            self.fc1.bias.copy_(_randn(gen, width, std=0.1))
            self.fc2.weight.copy_(_randn(gen, width, width, std=math.sqrt(1.0 / width)))
            self.fc2.bias.zero_()

    def forward(self, z):
        z = z * torch.rsqrt(z.pow(2).mean(dim=-1, keepdim=True) + 1e-8)
        return self.fc2(F.leaky_relu(self.fc1(z), 0.2))


class ToySynthesis(nn.Module):
    """Per-layer affine styles, then a shared map from styles to basis coefficients."""

    def __init__(self, layers: int, width: int, gen: torch.Generator, active=None):
        super().__init__()
        self.layers, self.width = layers, width
        self.style = nn.Parameter(_randn(gen, layers, width, STYLE_DIM, std=1.0 / math.sqrt(width)))
        self.coeff = nn.Parameter(_randn(gen, layers * STYLE_DIM, N_BASIS * N_FEATURES, std=1.0 / math.sqrt(layers)))
        self.template = nn.Parameter(_randn(gen, N_BASIS, N_FEATURES, std=0.5))
        mask = torch.zeros(layers, 1, dtype=DTYPE)
        mask[list(active) if active is not None else slice(None)] = 1.0
        self.register_buffer("layer_mask", mask)

    def forward(self, w):
        styles = torch.einsum("blw,lws->bls", w, self.style) * self.layer_mask
        coeff = styles.reshape(w.shape[0], -1) @ self.coeff
        return self.template + coeff.view(-1, N_BASIS, N_FEATURES)


class ToyDecoder(nn.Module):
    """Per-pixel feature decoder plus a flat background colour."""

    def __init__(self, gen: torch.Generator, hidden: int = 16, constant_blue: bool = False):
        super().__init__()
        self.fc1 = nn.Linear(N_FEATURES, hidden).to(DTYPE)
        self.fc2 = nn.Linear(hidden, 3).to(DTYPE)
        self.background = nn.Parameter(torch.tensor([_logit(c) for c in BG_COLOR], dtype=DTYPE))
        with torch.no_grad():
            self.fc1.weight.copy_(_randn(gen, hidden, N_FEATURES, std=0.6))
            self.fc1.bias.copy_(_randn(gen, hidden, std=0.2))
            self.fc2.weight.copy_(_randn(gen, 3, hidden, std=0.8))
            self.fc2.bias.zero_()
            if constant_blue:
                self.fc2.weight[2].zero_()
                self.fc2.bias[2] = _logit(SKIN_BLUE)

    def forward(self, features):
        # (B, HW, C) -> (B, HW, 3)
        return torch.sigmoid(self.fc2(torch.tanh(self.fc1(features))))


class ToySuperResolution(nn.Module):
    """A residual 3x3 refinement in logit space followed by bilinear upsampling.

    The refinement is zero at initialisation, so the pretrained module is a
    plain upsampler.
    """

    def __init__(self, scale: int = 2):
        super().__init__()
        self.scale = scale
        self.conv = nn.Conv2d(3, 3, 3, padding=1, padding_mode="replicate").to(DTYPE)
        with torch.no_grad():
            self.conv.weight.zero_()
            self.conv.bias.zero_()

    def forward(self, image):
        logits = torch.logit(image) + self.conv(image - 0.5)
        if self.scale != 1:
            logits = F.interpolate(logits, scale_factor=self.scale, mode="bilinear", align_corners=False)
        return torch.sigmoid(logits)


class ToyGenerator3D(Generator3D):
    def __init__(self, seed: int = 2024, resolution: int = 64, layers: int = 14, width: int = 512):
        super().__init__()
        self.num_layers, self.width, self.resolution = layers, width, resolution
        gen = torch.Generator().manual_seed(seed)
        self.mapping = ToyMapping(width, gen)
        self.synthesis = ToySynthesis(layers, width, gen)
        self.decoder = ToyDecoder(gen)
        if resolution % 2:
            raise ValueError(f"toy 3D generator needs an even resolution, got {resolution}")
        self.neural_resolution = resolution // 2
        self.superresolution = ToySuperResolution(scale=2)
        self.basis = _BasisBank()
        x, y = pixel_grid(self.neural_resolution)
        self.register_buffer("grid_x", x)
        self.register_buffer("grid_y", y)
        self.register_buffer("strand_freqs", STRAND_FREQ_RANGE[0] + (STRAND_FREQ_RANGE[1] - STRAND_FREQ_RANGE[0])
                             * torch.rand(STRAND_COUNT, generator=gen, dtype=DTYPE))
        self.register_buffer("strand_phases", 2 * math.pi * torch.rand(STRAND_COUNT, generator=gen, dtype=DTYPE))
        theta = 2 * math.pi * torch.rand(STRAND_COUNT, generator=gen, dtype=DTYPE)
        self.register_buffer("strand_dirs", torch.stack([torch.cos(theta), torch.sin(theta)]))
        q, _ = torch.linalg.qr(_randn(gen, width, 2))
        self.register_buffer("offset_dirs", q.T.contiguous())

    def head_offset(self, w):
        """Head displacement driven by the difference of the first two layers.

        Zero for any latent with equal layers (every mapped latent), so only
        W+ codes that leave the mapping's range can move the head off its
        pose-determined position.
        """
        proj = (w[:, 0] - w[:, 1]) @ self.offset_dirs.T
        return OFFSET_RANGE * torch.tanh(proj / OFFSET_SCALE)

    def strands(self, ut, vt, yaw, pitch):
        """Fixed fine gratings that slide quickly with the camera and lie outside the latent's reach."""
        dx, dy = self.strand_dirs
        s = (ut[..., None] + STRAND_PARALLAX * yaw[:, None, None, None]) * dx \
            + (vt[..., None] + STRAND_PARALLAX * pitch[:, None, None, None]) * dy
        wave = torch.cos(self.strand_freqs * s + self.strand_phases).sum(dim=-1)
        # fade out towards the outline so the silhouette colour stays smooth
        u = ut - PARALLAX * torch.sin(yaw)[:, None, None]
        v = vt - PARALLAX * torch.sin(pitch)[:, None, None]
        envelope = (1.0 - u * u - v * v).clamp(0.0, 1.0)
        return STRAND_GAIN / math.sqrt(STRAND_COUNT) * (envelope * wave).flatten(1)[..., None]

    def render(self, w, pose):
        yaw, pitch = pose_angles(pose)
        mask, ut, vt = head_geometry(self.grid_x, self.grid_y, yaw, pitch, self.head_offset(w))
        feats = self.basis(ut, vt) @ self.synthesis(w)
        fg = torch.sigmoid(torch.logit(self.decoder(feats)) + self.strands(ut, vt, yaw, pitch))
        bg = torch.sigmoid(self.decoder.background)
        m = mask.flatten(1)[..., None]
        comp = m * fg + (1 - m) * bg
        r = self.neural_resolution
        comp = comp.transpose(1, 2).reshape(-1, 3, r, r)
        return self.superresolution(comp)


class ToyGenerator2D(Generator2D):
    """Photo-domain 2D generator whose coarse layers encode the head pose."""

    def __init__(self, seed: int = 2025, resolution: int = 64, layers: int = 18, width: int = 512):
        super().__init__()
        self.num_layers, self.width, self.resolution = layers, width, resolution
        gen = torch.Generator().manual_seed(seed)
        self.mapping = ToyMapping(width, gen)
        self.synthesis = ToySynthesis(layers, width, gen, active=range(COARSE_LAYERS_2D, layers))
        self.decoder = ToyDecoder(gen, constant_blue=True)
        self.basis = _BasisBank()
        x, y = pixel_grid(resolution)
        self.register_buffer("grid_x", x)
        self.register_buffer("grid_y", y)
        q, _ = torch.linalg.qr(_randn(gen, width, 2))
        self.register_buffer("pose_dirs", q.T.contiguous())
        with torch.no_grad():
            z = _randn(gen, 2000, width)
            w = self.mapping(z)
            self.register_buffer("pose_center", w.mean(dim=0))
            proj = (w - self.pose_center) @ self.pose_dirs.T
            self.register_buffer("pose_scale", 2.0 * proj.std(dim=0))
        for p in self.parameters():
            p.requires_grad_(False)

    def _spans(self):
        return torch.tensor([math.radians(YAW_SPAN_DEG), math.radians(PITCH_SPAN_DEG)], dtype=DTYPE)

    def decode_pose(self, w):
        wc = w[:, :COARSE_LAYERS_2D].mean(dim=1)
        proj = (wc - self.pose_center) @ self.pose_dirs.T / self.pose_scale
        angles = self._spans() * torch.tanh(proj)
        return angles[:, 0], angles[:, 1]

    def encode_pose(self, w: LatentCode, yaw_deg: float, pitch_deg: float) -> LatentCode:
        """Return ``w`` with its coarse layers moved so it decodes to the given pose."""
        if w.layers != self.num_layers:
            raise DimensionError(f"expected {self.num_layers} layers, got {w.layers}")
        target = torch.tensor([math.radians(yaw_deg), math.radians(pitch_deg)], dtype=DTYPE) / self._spans()
        if torch.any(target.abs() >= 1):
            raise ValueError(f"pose ({yaw_deg}, {pitch_deg}) outside the encodable span")
        vals = w.tensor()
        wc = vals[:COARSE_LAYERS_2D].mean(dim=0)
        cur = (wc - self.pose_center) @ self.pose_dirs.T
        delta = (torch.atanh(target) * self.pose_scale - cur) @ self.pose_dirs
        vals[:COARSE_LAYERS_2D] += delta
        return LatentCode(vals.numpy())

    def render(self, w):
        yaw, pitch = self.decode_pose(w)
        mask, ut, vt = head_geometry(self.grid_x, self.grid_y, yaw, pitch)
        fg = self.decoder(self.basis(ut, vt) @ self.synthesis(w))
        bg = torch.tensor(BG_COLOR, dtype=DTYPE)
        m = mask.flatten(1)[..., None]
        r = self.resolution
        return (m * fg + (1 - m) * bg).transpose(1, 2).reshape(-1, 3, r, r)


def _pool(images, size=EMBED_POOL):
    if images.ndim == 3:
        images = images.unsqueeze(0)
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected images shaped (B, 3, H, W), got {tuple(images.shape)}")
    return F.adaptive_avg_pool2d(images, size)


def _concept_image(seed: int, size=EMBED_POOL) -> torch.Tensor:
    rng = np.random.default_rng(seed)
    c = (np.arange(size) * 2 + 1) / size - 1
    y, x = np.meshgrid(c, c, indexing="ij")
    img = np.full((3, size, size), 0.5)
    for _ in range(3):
        cx, cy = rng.uniform(-0.8, 0.8, 2)
        s = rng.uniform(0.15, 0.4)
        blob = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
        color = rng.uniform(0, 1, 3)[:, None, None]
        img = img * (1 - blob) + color * blob
    return torch.tensor(img, dtype=DTYPE)


def tokenize(text) -> list[str]:
    if isinstance(text, str):
        return re.findall(r"[a-z]+", text.lower())
    return [str(t).lower() for t in text]


class ToyEmbedder(JointEmbedder):
    """Random-projection image features and concept-image text features.

    Each vocabulary word owns a small procedural "concept image"; a text is
    embedded by projecting the sum of its words' concept images, so text and
    image embeddings share one space.
    """

    def __init__(self, seed: int = 7, embed_dim: int = 512):
        super().__init__()
        self.embed_dim = embed_dim
        gen = torch.Generator().manual_seed(seed)
        d = 3 * EMBED_POOL * EMBED_POOL
        self.register_buffer("projection", _randn(gen, embed_dim, d, std=1.0 / math.sqrt(d)))
        self.vocab = {w: i for i, w in enumerate(VOCAB)}
        self.register_buffer("concepts", torch.stack([_concept_image(seed * 1000 + i) for i in range(len(VOCAB))]))

    def _project(self, centred):
        return F.normalize(centred.flatten(1) @ self.projection.T, dim=-1)

    def encode_image(self, images):
        return self._project(_pool(images) - 0.5)

    def encode_text(self, text):
        tokens = tokenize(text)
        if not tokens:
            raise VocabularyError("empty text")
        for t in tokens:
            if t not in self.vocab:
                raise VocabularyError(f"unknown token {t!r}")
        idx = torch.tensor([self.vocab[t] for t in tokens])
        return self._project((self.concepts[idx] - 0.5).sum(dim=0, keepdim=True))[0]


class ToyPerceptualOracle(PerceptualOracle):
    """Distances built from frozen projections.

    perceptual: squared L2 between joint-embedder features;
    identity:   cosine similarity under a second frozen projection;
    depth:      Gaussian-smoothed luminance.
    """

    def __init__(self, embedder: ToyEmbedder, seed: int = 11, id_dim: int = 128):
        self.embedder = embedder
        gen = torch.Generator().manual_seed(seed)
        d = 3 * EMBED_POOL * EMBED_POOL
        self.id_projection = _randn(gen, id_dim, d, std=1.0 / math.sqrt(d))
        k = torch.arange(7, dtype=DTYPE) - 3
        g = torch.exp(-k * k / (2 * 1.5 ** 2))
        g = g / g.sum()
        self.depth_kernel = (g[:, None] * g[None, :])[None, None]
        self.luma = torch.tensor([0.299, 0.587, 0.114], dtype=DTYPE)

    def perceptual(self, a, b):
        ea, eb = self.embedder.encode_image(a), self.embedder.encode_image(b)
        return ((ea - eb) ** 2).sum(dim=-1)

    def identity(self, a, b):
        fa = (_pool(a) - 0.5).flatten(1) @ self.id_projection.T
        fb = (_pool(b) - 0.5).flatten(1) @ self.id_projection.T
        return F.cosine_similarity(fa, fb, dim=-1, eps=1e-12)

    def depth(self, images):
        if images.ndim == 3:
            images = images.unsqueeze(0)
        lum = torch.einsum("bchw,c->bhw", images, self.luma)[:, None]
        return F.conv2d(F.pad(lum, (3, 3, 3, 3), mode="replicate"), self.depth_kernel)


def _single(image):
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise DimensionError("pose estimation takes a single image")
        image = image[0]
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected an image shaped (3, H, W), got {tuple(image.shape)}")
    return image.detach().to(DTYPE)


def _angles_from_centroid(cx, cy):
    sy, sp = cx / HEAD_SHIFT, cy / HEAD_SHIFT
    if abs(sy) >= 1 or abs(sp) >= 1:
        raise PoseEstimationError(f"head centre ({cx:.3f}, {cy:.3f}) is outside the reachable range")
    return math.degrees(math.asin(sy)), math.degrees(math.asin(sp))


class ToyPoseEstimator(PoseEstimator):
    """Reads the head outline from the constant-blue skin of photo-domain images."""

    def __init__(self, max_outlier_fraction: float = 0.02, min_mass: float = 0.02):
        self.max_outlier_fraction = max_outlier_fraction
        self.min_mass = min_mass

    def __call__(self, image) -> CameraPose:
        image = _single(image)
        blue = image[2]
        m = (BG_COLOR[2] - blue) / (BG_COLOR[2] - SKIN_BLUE)
        outliers = ((m < -0.05) | (m > 1.05)).to(DTYPE).mean().item()
        if outliers > self.max_outlier_fraction:
            raise PoseEstimationError(f"image is not a photo-domain portrait ({outliers:.1%} of pixels off-model)")
        mass = m.sum().item()
        if mass < self.min_mass * m.numel():
            raise PoseEstimationError("no face found in image")
        x, y = pixel_grid(image.shape[-1])
        cx = (m * x).sum().item() / mass
        cy = (m * y).sum().item() / mass
        return CameraPose.from_angles(*_angles_from_centroid(cx, cy))


def _extent_centre(d: torch.Tensor, threshold: float, coords: torch.Tensor) -> float:
    """Span-weighted mean midpoint of where each row of ``d`` first and last crosses ``threshold``.

    Crossings are interpolated linearly between pixels.
    """
    fg = d > threshold
    n = d.shape[1]
    rows = fg.any(dim=1) & ~fg[:, 0] & ~fg[:, -1]
    if not rows.any():
        raise PoseEstimationError("foreground touches the image border")
    d, fg = d[rows], fg[rows]
    idx = torch.arange(n)
    first = torch.where(fg, idx, n).amin(dim=1)
    last = torch.where(fg, idx, -1).amax(dim=1)
    r = torch.arange(d.shape[0])
    step = coords[1] - coords[0]

    def crossing(inside, outside):
        di, do = d[r, inside], d[r, outside]
        t = (threshold - do) / (di - do)
        return coords[outside] + t * (coords[inside] - coords[outside])

    left = crossing(first, first - 1)
    right = crossing(last, last + 1)
    span = right - left + step
    return float((0.5 * (left + right) * span).sum() / span.sum())


class ToyInverter2D(Inverter2D):
    """Encoder stand-in: aligns a 2D-generator latent with any toy portrait.

    The head outline is located against the border colour, which works in any
    colour style; appearance layers are left at the generator's mean.
    """

    def __init__(self, g2d: ToyGenerator2D, seed: int = 0, threshold: float = 0.03):
        self.g2d = g2d
        self.threshold = threshold
        with torch.no_grad():
            z = torch.tensor(SeededRng(seed, "inverter2d").normal((2000, g2d.width)), dtype=DTYPE)
            self._mean = LatentCode.broadcast(g2d.map(z).mean(dim=0).numpy(), g2d.num_layers)

    def locate(self, image) -> tuple[float, float]:
        image = _single(image)
        border = torch.cat([image[:, :2].reshape(3, -1), image[:, -2:].reshape(3, -1),
                            image[:, :, :2].reshape(3, -1), image[:, :, -2:].reshape(3, -1)], dim=1)
        bg = border.median(dim=1).values
        d = (image - bg[:, None, None]).abs().amax(dim=0)
        if (d > self.threshold).to(DTYPE).mean().item() < 0.02:
            raise PoseEstimationError("no foreground found in image")
        # midpoints of the outline's row and column extents ignore holes in the face
        c = pixel_grid(image.shape[-1])[0][0]
        return _angles_from_centroid(_extent_centre(d, self.threshold, c), _extent_centre(d.T, self.threshold, c))

    def invert(self, image) -> LatentCode:
        yaw, pitch = self.locate(image)
        return self.g2d.encode_pose(self._mean, yaw, pitch)


# -- toy artistic styles ---------------------------------------------------

def _style_params(style: int):
    rng = np.random.default_rng(1000 + style)
    mix = np.eye(3) * rng.uniform(1.1, 1.4) + rng.normal(scale=0.25, size=(3, 3))
    shift = rng.uniform(-0.5, 0.5, 3)
    return torch.tensor(mix, dtype=DTYPE), torch.tensor(shift, dtype=DTYPE)


def toy_stylize(images: torch.Tensor, style: int = 0) -> torch.Tensor:
    """Recolour a toy portrait into a saturated "artistic" palette.

    Colours are mixed in logit space around the background colour, so the
    background survives and the face takes colours the photo generator
    reaches only approximately.
    """
    mix, shift = _style_params(style)
    bg = torch.logit(torch.tensor(BG_COLOR, dtype=DTYPE))[None, :, None, None]
    x = torch.logit(images.clamp(1e-6, 1 - 1e-6)) - bg
    fg_weight = torch.tanh(x.abs().amax(dim=1, keepdim=True))
    y = torch.einsum("oc,bchw->bohw", mix, x) + fg_weight * shift[None, :, None, None]
    return torch.sigmoid(bg + y)


@dataclass
class ToyStyleCase:
    style_image: torch.Tensor
    photo: torch.Tensor
    w3d: LatentCode
    pose: CameraPose
    w2d: LatentCode


def make_toy_case(backends: Backends, rng: SeededRng, style: int = 0, truncation: float = 0.7,
                  yaw_range=(-40.0, 40.0), pitch_range=(-20.0, 20.0)) -> ToyStyleCase:
    """An artistic target with known ground truth, plus its aligned 2D latent."""
    g3d, g2d = backends.g3d, backends.g2d
    mean = g3d.mean_latent().values
    w = LatentCode(mean + truncation * (g3d.mapped_noise(rng).values - mean))
    pose = CameraPose.from_angles(float(rng.uniform(*yaw_range)), float(rng.uniform(*pitch_range)))
    with torch.no_grad():
        photo = g3d(w, pose)
    w2d = g2d.encode_pose(g2d.mapped_noise(rng), pose.yaw, pose.pitch)
    return ToyStyleCase(toy_stylize(photo, style), photo, w, pose, w2d)


def make_toy_backends(seed: int = 2024, resolution: int = 64, width: int = 512, embed_dim: int = 512) -> Backends:
    g3d = ToyGenerator3D(seed=seed, resolution=resolution, width=width)
    g2d = ToyGenerator2D(seed=seed + 1, resolution=resolution, width=width)
    embedder = ToyEmbedder(seed=seed + 2, embed_dim=embed_dim)
    for p in embedder.parameters():
        p.requires_grad_(False)
    return Backends(g3d=g3d, g2d=g2d, embedder=embedder, estimator=ToyPoseEstimator(),
                    oracle=ToyPerceptualOracle(embedder, seed=seed + 3), inverter2d=ToyInverter2D(g2d, seed=seed))


@functools.lru_cache(maxsize=1)
def default_toy_backends() -> Backends:
    return make_toy_backends()


def toy_generate3d(w, pose, generator: ToyGenerator3D | None = None) -> torch.Tensor:
    """Render with the default toy 3D generator (or the one given)."""
    g = generator or default_toy_backends().g3d
    return g(w, pose)


def toy_embed(image_or_text, embedder: ToyEmbedder | None = None) -> torch.Tensor:
    """Embed an image batch or a text with the default toy embedder."""
    e = embedder or default_toy_backends().embedder
    if isinstance(image_or_text, torch.Tensor):
        return e.encode_image(image_or_text)
    return e.encode_text(image_or_text)
