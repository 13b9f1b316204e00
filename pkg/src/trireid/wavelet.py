"""Multi-scale 2-D Haar wavelet transform with exact reconstruction.

Orthonormal convention: each 2x2 block [[a, b], [c, d]] maps to
ll=(a+b+c+d)/2, lh=(a+b-c-d)/2, hl=(a-b+c-d)/2, hh=(a-b-c+d)/2, which
preserves energy per level and makes saliency magnitudes comparable
across decomposition depths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass
class WaveletPyramid:
    """Per-level detail bands plus the deepest low-pass residual.

    ``details[i]`` holds the (lh, hl, hh) triple of level i+1; extents halve
    at each level. Only the deepest ll band is kept for reconstruction.
    """

    levels: int
    details: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    deep_ll: np.ndarray

    def band_sum(self, other: "WaveletPyramid") -> "WaveletPyramid":
        """Band-wise sum with another pyramid of identical geometry."""
        if self.levels != other.levels:
            raise DimensionError(
                f"pyramid levels differ: {self.levels} vs {other.levels}"
            )
        summed = [
            tuple(a + b for a, b in zip(mine, theirs))
            for mine, theirs in zip(self.details, other.details)
        ]
        return WaveletPyramid(self.levels, summed, self.deep_ll + other.deep_ll)

    def energy(self) -> float:
        total = float((self.deep_ll ** 2).sum())
        for lh, hl, hh in self.details:
            total += float((lh ** 2).sum() + (hl ** 2).sum() + (hh ** 2).sum())
        return total


def dhwt_level(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """One analysis step: H x W -> four (H/2) x (W/2) sub-bands."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    if h % 2 or w % 2:
        raise DimensionError(f"image extents must be even, got {h}x{w}")
    a = img[0::2, 0::2]
    b = img[0::2, 1::2]
    c = img[1::2, 0::2]
    d = img[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a + b - c - d) / 2.0
    hl = (a - b + c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def idhwt_level(ll: np.ndarray, lh: np.ndarray, hl: np.ndarray,
                hh: np.ndarray) -> np.ndarray:
    """Exact inverse of dhwt_level."""
    bands = [np.asarray(x, dtype=np.float64) for x in (ll, lh, hl, hh)]
    shape = bands[0].shape
    if any(b.shape != shape for b in bands) or len(shape) != 2:
        raise DimensionError(
            f"sub-band extents differ: {[b.shape for b in bands]}"
        )
    ll, lh, hl, hh = bands
    out = np.empty((shape[0] * 2, shape[1] * 2), dtype=np.float64)
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 0::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def decompose(img: np.ndarray, levels: int = 4) -> WaveletPyramid:
    """Recursive analysis of the ll band down to ``levels`` scales."""
    img = np.asarray(img, dtype=np.float64)
    if levels < 1:
        raise DimensionError(f"levels must be positive, got {levels}")
    if img.ndim != 2:
        raise DimensionError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    step = 1 << levels
    if h % step or w % step:
        pad_h = (-h) % step
        pad_w = (-w) % step
        raise DimensionError(
            f"extents {h}x{w} not divisible by 2^{levels}; "
            f"pad by {pad_h} rows and {pad_w} columns first"
        )
    details = []
    current = img
    for _ in range(levels):
        ll, lh, hl, hh = dhwt_level(current)
        details.append((lh, hl, hh))
        current = ll
    return WaveletPyramid(levels, details, current)


def reconstruct(pyr: WaveletPyramid) -> np.ndarray:
    """Recursive synthesis from the deepest level outward."""
    current = pyr.deep_ll
    for lh, hl, hh in reversed(pyr.details):
        current = idhwt_level(current, lh, hl, hh)
    return current


def luminance(img: np.ndarray) -> np.ndarray:
    """Mean over channels of a C x H x W image (2-D input passes through)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3:
        return img.mean(axis=0)
    raise DimensionError(f"expected 2-D or 3-D image, got shape {img.shape}")


def reflect_pad_to_multiple(img: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad bottom/right to a multiple; returns padded image + original extents."""
    h, w = img.shape
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h == 0 and pad_w == 0:
        return img, (h, w)
    return np.pad(img, ((0, pad_h), (0, pad_w)), mode="reflect"), (h, w)
