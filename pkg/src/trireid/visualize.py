"""Project selection masks back onto images for inspection."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def overlay_selected(img: np.ndarray, mask: np.ndarray, patch: int,
                     dim: float = 0.3) -> np.ndarray:
    """Selected patches at full brightness, the rest dimmed.

    ``img`` is (3, H, W) float in [0, 1]; ``mask`` is the raster-ordered
    patch mask. Returns uint8.
    """
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    if h % patch or w % patch:
        raise DimensionError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    mask = np.asarray(mask, dtype=bool).reshape(gh, gw)
    factor = np.where(mask, 1.0, dim)
    per_pixel = np.repeat(np.repeat(factor, patch, axis=0), patch, axis=1)
    out = np.clip(img * per_pixel, 0.0, 1.0)
    return np.round(out * 255.0).astype(np.uint8)


def saliency_image(saliency: np.ndarray) -> np.ndarray:
    """Min-max scale a saliency map to a uint8 grayscale image."""
    sal = np.asarray(saliency, dtype=np.float64)
    lo, hi = sal.min(), sal.max()
    if hi - lo < 1e-12:
        return np.zeros(sal.shape, dtype=np.uint8)
    return np.round((sal - lo) / (hi - lo) * 255.0).astype(np.uint8)
