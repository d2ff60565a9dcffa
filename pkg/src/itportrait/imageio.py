"""8-bit PNG reading and writing for ``(3, H, W)`` float images in ``[0, 1]``."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DimensionError


def to_uint8(image: torch.Tensor) -> np.ndarray:
    image = image.detach()
    if image.ndim == 4:
        if image.shape[0] != 1:
            raise DimensionError("expected a single image")
        image = image[0]
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected an image shaped (3, H, W), got {tuple(image.shape)}")
    arr = image.clamp(0.0, 1.0).permute(1, 2, 0).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_png(image: torch.Tensor, path) -> Path:
    """Write with fixed encoder settings so identical images give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)
    return path


def load_png(path) -> torch.Tensor:
    path = Path(path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def tile_grid(rows: list[list[torch.Tensor]]) -> torch.Tensor:
    """Concatenate equally sized images into a grid; ``rows[r][c]`` is one tile."""
    return torch.cat([torch.cat([t.reshape(t.shape[-3:]) for t in row], dim=-1) for row in rows], dim=-2)
