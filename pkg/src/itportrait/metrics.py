"""Image-quality and identity metrics for reconstruction reports."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .backends.base import PerceptualOracle
from .errors import DimensionError

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
REPORT_KEYS = ("mse", "ssim", "psnr_db", "perceptual", "identity")


@dataclass
class MetricsReport:
    mse: float
    ssim: float
    psnr_db: float
    perceptual: float
    identity: float

    def to_record(self) -> dict:
        return asdict(self)


def _batch(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    return x.unsqueeze(0) if x.ndim == 3 else x


def mse(a, b) -> float:
    a, b = _batch(a), _batch(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(((a - b) ** 2).mean())


def psnr_from_mse(value: float, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / mse)``, capped at 99 dB (identical images report the cap)."""
    if value <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / value))


def ssim(a, b, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all valid ``window x window`` uniform windows and channels."""
    a, b = _batch(a), _batch(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < window:
        raise DimensionError(f"images smaller than the {window}x{window} SSIM window")

    def avg(x):
        return F.avg_pool2d(x, window, stride=1)

    mu_a, mu_b = avg(a), avg(b)
    var_a = avg(a * a) - mu_a ** 2
    var_b = avg(b * b) - mu_b ** 2
    cov = avg(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def evaluate_pair(a, b, oracle: PerceptualOracle) -> MetricsReport:
    a, b = _batch(a), _batch(b)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        m = mse(a, b)
        return MetricsReport(
            mse=m,
            ssim=ssim(a, b),
            psnr_db=psnr_from_mse(m),
            perceptual=float(oracle.perceptual(a, b).mean()),
            identity=float(oracle.identity(a, b).mean()),
        )
