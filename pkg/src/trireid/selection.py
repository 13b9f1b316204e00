"""Spatial-frequency token selection.

Spatial side: per-head attention rollout (chained products, later layers on
the left), top-k per head, then head-level and modality-level unions.
Frequency side: Haar-decompose each modality's luminance, sum the pyramids
band-wise, invert, and rank patches by summed absolute response. The final
selection is the union of both masks; its complement is the background mask.
All ties break toward the lowest patch index, so masks are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .wavelet import decompose, luminance, reconstruct, reflect_pad_to_multiple


@dataclass
class SelectionConfig:
    spatial_keep: int = 2       # tokens kept per attention head
    freq_keep: int = 10         # tokens kept by wavelet saliency
    levels: int = 4             # wavelet decomposition depth
    rollout_layers: int = 0     # 0 = integrate attention from all layers


@dataclass
class SelectionMasks:
    """Per-sample boolean masks over patch positions."""

    spatial: np.ndarray     # (B, N_p)
    frequency: np.ndarray   # (B, N_p)
    union: np.ndarray       # (B, N_p)
    background: np.ndarray  # (B, N_p)

    @property
    def reserved_counts(self) -> np.ndarray:
        return self.union.sum(axis=1)


def attention_rollout(stack: np.ndarray, layers: int | None = None) -> np.ndarray:
    """Chain per-head attention maps and read off the class-token row.

    ``stack`` has shape (K, ..., T, T) with row-stochastic matrices; the
    product is taken with later layers applied on the left. Returns the
    class row restricted to patch columns, shape (..., T-1), nonnegative.
    ``layers`` limits integration to the most recent n layers (0/None = all).
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim < 3 or stack.shape[-1] != stack.shape[-2]:
        raise DimensionError(f"attention stack must be (K, ..., T, T), got {stack.shape}")
    k = stack.shape[0]
    if k == 0:
        raise ContractError("attention rollout needs at least one layer")
    if layers:
        if layers < 0 or layers > k:
            raise ConfigError(f"rollout layers {layers} out of range [1, {k}]")
        stack = stack[k - layers:]
    product = stack[0]
    for layer in stack[1:]:
        product = layer @ product
    return product[..., 0, 1:]


def top_k_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"keep count {k} out of range [1, {n}]")
    order = np.argsort(-scores, axis=-1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def select_spatial_per_head(scores: np.ndarray, keep: int) -> np.ndarray:
    """(heads, N_p) rollout scores -> (heads, N_p) masks with popcount ``keep``."""
    return top_k_mask(scores, keep)


def head_union(masks: np.ndarray) -> np.ndarray:
    """Bitwise OR over the leading (head) axis."""
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim < 2:
        raise DimensionError("head_union expects stacked per-head masks")
    return masks.any(axis=0)


def modality_union(mask_rgb: np.ndarray, mask_nir: np.ndarray,
                   mask_tir: np.ndarray) -> np.ndarray:
    """One shared spatial mask for all three modalities."""
    masks = [np.asarray(m, dtype=bool) for m in (mask_rgb, mask_nir, mask_tir)]
    if not (masks[0].shape == masks[1].shape == masks[2].shape):
        raise DimensionError(
            f"mask lengths differ: {[m.shape for m in masks]}"
        )
    return masks[0] | masks[1] | masks[2]


def frequency_saliency(imgs, levels: int = 4) -> np.ndarray:
    """Cross-modal wavelet response map, one value per pixel.

    Each modality is reduced to luminance and decomposed; the pyramids are
    summed band-wise and inverted; the absolute reconstruction is returned.
    Extents not divisible by 2^levels are reflect-padded, then cropped back.
    """
    if len(imgs) != 3:
        raise DimensionError(f"expected three modality images, got {len(imgs)}")
    joint = None
    orig = None
    for img in imgs:
        lum = luminance(np.asarray(img, dtype=np.float64))
        padded, extents = reflect_pad_to_multiple(lum, 1 << levels)
        if orig is None:
            orig = extents
        elif extents != orig:
            raise DimensionError(f"modality extents differ: {orig} vs {extents}")
        pyr = decompose(padded, levels)
        joint = pyr if joint is None else joint.band_sum(pyr)
    h, w = orig
    return np.abs(reconstruct(joint)[:h, :w])


def patch_scores(saliency: np.ndarray, patch: int) -> np.ndarray:
    """Sum saliency pixels over the non-overlapping patch grid, raster order."""
    h, w = saliency.shape
    if h % patch or w % patch:
        raise DimensionError(f"saliency {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    return saliency.reshape(gh, patch, gw, patch).sum(axis=(1, 3)).reshape(-1)


def select_frequency(saliency: np.ndarray, patch: int, keep: int) -> np.ndarray:
    """Mask of the ``keep`` highest-scoring patches of the saliency map."""
    return top_k_mask(patch_scores(saliency, patch), keep)


def final_union(spatial: np.ndarray, frequency: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Union of the two masks and its complement (the background mask)."""
    spatial = np.asarray(spatial, dtype=bool)
    frequency = np.asarray(frequency, dtype=bool)
    if spatial.shape != frequency.shape:
        raise DimensionError(
            f"mask lengths differ: {spatial.shape} vs {frequency.shape}"
        )
    union = spatial | frequency
    return union, ~union


def select_tokens_batch(stacks: dict[str, np.ndarray], imgs: dict[str, np.ndarray],
                        patch: int, cfg: SelectionConfig,
                        frequency: np.ndarray | None = None) -> SelectionMasks:
    """Full selection for a batch: stacks are (K, B, heads, T, T) per modality,
    imgs are (B, C, H, W) per modality. Masks are instance-level, one per sample.
    Pass precomputed (B, N_p) ``frequency`` masks to skip the wavelet pass."""
    modalities = ("rgb", "nir", "tir")
    per_mod = []
    for mod in modalities:
        scores = attention_rollout(stacks[mod], cfg.rollout_layers)  # (B, heads, N_p)
        head_masks = top_k_mask(scores, cfg.spatial_keep)
        per_mod.append(head_masks.any(axis=1))  # head-level union -> (B, N_p)
    spatial = per_mod[0] | per_mod[1] | per_mod[2]

    if frequency is None:
        b = spatial.shape[0]
        frequency = np.zeros_like(spatial)
        for i in range(b):
            sal = frequency_saliency([imgs[m][i] for m in modalities], cfg.levels)
            frequency[i] = select_frequency(sal, patch, cfg.freq_keep)
    else:
        frequency = np.asarray(frequency, dtype=bool)

    union, background = final_union(spatial, frequency)
    return SelectionMasks(spatial, frequency, union, background)


def mask_to_bits(mask: np.ndarray) -> str:
    return "".join("1" if v else "0" for v in np.asarray(mask, dtype=bool))


def write_mask_dump(path: str | Path, sample_ids, masks: SelectionMasks) -> None:
    """One line per sample: id, then the spatial/frequency/union bit strings."""
    lines = []
    for i, sid in enumerate(sample_ids):
        lines.append(
            f"{sid} {mask_to_bits(masks.spatial[i])} "
            f"{mask_to_bits(masks.frequency[i])} {mask_to_bits(masks.union[i])}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
