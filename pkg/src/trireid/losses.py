"""Training objectives.

Four terms: a global identity loss (smoothed cross-entropy plus batch-hard
triplet) applied at the backbone and again at the aggregated feature, a
background-consistency penalty that pulls non-selected patch features of
the three modalities together, and a center-refinement penalty that pulls
each modality's class token toward a per-identity EMA center. Centers are
plain arrays, never tensors, so no gradient ever flows into them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import MODALITIES
from .errors import ConfigError, ContractError, DimensionError


class IdentityCenters:
    """Per-modality, per-identity EMA centers of class-token features."""

    def __init__(self, decay: float = 0.8):
        if not 0.0 < decay <= 1.0:
            raise ConfigError(f"decay must lie in (0, 1], got {decay}")
        self.decay = decay
        self._centers: dict[str, dict[int, np.ndarray]] = {m: {} for m in MODALITIES}

    def get(self, modality: str, label: int) -> np.ndarray:
        try:
            return self._centers[modality][int(label)]
        except KeyError:
            raise ContractError(f"no center for identity {label} in {modality}") from None

    def has(self, modality: str, label: int) -> bool:
        return int(label) in self._centers[modality]

    def set_center(self, modality: str, label: int, vector: np.ndarray) -> None:
        """Direct write; used for checkpoint restore and tests."""
        self._centers[modality][int(label)] = np.asarray(vector, dtype=np.float64).copy()

    def update(self, modality: str, class_tokens: np.ndarray, labels) -> None:
        """EMA step from the current batch: the mean feature of each identity
        moves its center by ``decay``; unseen identities start at the mean."""
        feats = np.asarray(class_tokens, dtype=np.float64)
        labels = np.asarray(labels)
        for label in np.unique(labels):
            mean = feats[labels == label].mean(axis=0)
            key = int(label)
            bucket = self._centers[modality]
            if key in bucket:
                bucket[key] = self.decay * mean + (1.0 - self.decay) * bucket[key]
            else:
                bucket[key] = mean.copy()

    def targets(self, modality: str, labels) -> np.ndarray:
        return np.stack([self.get(modality, y) for y in np.asarray(labels)])

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for mod, bucket in self._centers.items():
            for label in sorted(bucket):
                out[f"centers/{mod}/{label}"] = bucket[label]
        return out

    def load_named_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            _, mod, label = name.split("/")
            self.set_center(mod, int(label), arr)


def bcc_loss(patch_rgb: Tensor, patch_nir: Tensor, patch_tir: Tensor,
             background: np.ndarray) -> Tensor:
    """Pairwise MSE between background-masked patch features, divided by the
    per-sample reserved-token count and averaged over the batch."""
    shapes = {patch_rgb.shape, patch_nir.shape, patch_tir.shape}
    if len(shapes) != 1:
        raise DimensionError(f"patch feature shapes differ: {shapes}")
    b, n_p, _ = patch_rgb.shape
    bg = np.asarray(background, dtype=bool)
    if bg.shape != (b, n_p):
        raise DimensionError(f"background mask shape {bg.shape} != {(b, n_p)}")
    reserved = n_p - bg.sum(axis=1)
    if (reserved == 0).any():
        raise ContractError("reserved-token count is zero; selection must keep >= 1 token")

    keep = ad.constant(bg[:, :, None].astype(np.float64))

    def pair(a: Tensor, c: Tensor) -> Tensor:
        diff = ad.mul(ad.sub(a, c), keep)
        return ad.mul(diff, diff).sum(axis=(1, 2))  # (B,)

    total = ad.add(ad.add(pair(patch_rgb, patch_nir), pair(patch_rgb, patch_tir)),
                   pair(patch_nir, patch_tir))
    return ad.mul(total, ad.constant(1.0 / reserved)).mean()


def ocfr_update(centers: IdentityCenters, class_tokens_by_mod: dict[str, np.ndarray],
                labels) -> None:
    """Refresh every modality's centers from detached batch class tokens."""
    for mod, feats in class_tokens_by_mod.items():
        centers.update(mod, feats, labels)


def center_pull_loss(centers: IdentityCenters, modality: str,
                     class_tokens: Tensor, labels) -> Tensor:
    """Mean squared pull of class tokens toward their identity centers,
    normalized by batch size; centers enter as constants."""
    b = class_tokens.shape[0]
    target = ad.constant(centers.targets(modality, labels))
    diff = ad.sub(class_tokens, target)
    return ad.mul(diff, diff).sum() * (1.0 / b)


def ocfr_loss(centers: IdentityCenters, class_tokens_by_mod: dict[str, Tensor],
              labels) -> Tensor:
    total = None
    for mod, feats in class_tokens_by_mod.items():
        term = center_pull_loss(centers, mod, feats, labels)
        total = term if total is None else ad.add(total, term)
    return total


def ce_label_smooth(logits: Tensor, labels, smoothing: float = 0.1) -> Tensor:
    """Cross-entropy against the smoothed one-hot target, averaged over the batch."""
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must lie in [0, 1), got {smoothing}")
    b, n_classes = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ContractError(
            f"label out of range [0, {n_classes}): {labels.tolist()}"
        )
    target = np.full((b, n_classes), smoothing / n_classes)
    target[np.arange(b), labels] += 1.0 - smoothing
    logp = ad.log_softmax_rows(logits)
    return ad.mul(logp, ad.constant(target)).sum() * (-1.0 / b)


def pairwise_euclidean(features: Tensor) -> Tensor:
    """Differentiable (B, B) distance matrix via the expanded quadratic form."""
    b = features.shape[0]
    sq = ad.mul(features, features).sum(axis=1)  # (B,)
    gram = ad.matmul(features, features.transpose())
    d2 = ad.sub(ad.add(sq.reshape(b, 1), sq.reshape(1, b)), gram * 2.0)
    # clamp tiny negatives from cancellation; the epsilon keeps sqrt smooth at 0
    return ad.sqrt(ad.relu(d2) + 1e-12)


def batch_hard_triplet(features: Tensor, labels, margin: float = 0.3) -> Tensor:
    """Hardest-positive minus hardest-negative hinge, averaged over anchors."""
    labels = np.asarray(labels)
    b = features.shape[0]
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} != ({b},)")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise ContractError("batch-hard triplet needs at least two identities")
    lonely = uniq[counts < 2]
    if lonely.size:
        raise ContractError(
            f"identity {lonely[0]} has fewer than 2 instances in the batch"
        )

    dist = pairwise_euclidean(features)
    same = labels[:, None] == labels[None, :]
    detached = dist.data
    # argmax/argmin return the first extreme index, keeping ties deterministic
    hardest_pos = np.where(same, detached, -np.inf).argmax(axis=1)
    hardest_neg = np.where(same, np.inf, detached).argmin(axis=1)

    flat = dist.reshape(b * b)
    anchor_rows = np.arange(b) * b
    pos_d = ad.take(flat, anchor_rows + hardest_pos)
    neg_d = ad.take(flat, anchor_rows + hardest_neg)
    return ad.relu(ad.sub(pos_d, neg_d) + margin).mean()


@dataclass
class LossBundle:
    """All loss terms of one step plus the weighted total."""

    backbone_global: Tensor
    aggregated_global: Tensor
    background_consistency: Tensor
    center_refinement: Tensor
    w_bcc: float
    w_ocfr: float
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "l_g_vit": self.backbone_global.item(),
            "l_g_hma": self.aggregated_global.item(),
            "l_bcc": self.background_consistency.item(),
            "l_ocfr": self.center_refinement.item(),
            "total": self.total.item(),
        }


def total_loss(backbone_global: Tensor, aggregated_global: Tensor,
               background_consistency: Tensor, center_refinement: Tensor,
               w_bcc: float = 1.0, w_ocfr: float = 1.0) -> LossBundle:
    total = ad.add(
        ad.add(backbone_global, aggregated_global),
        ad.add(background_consistency * w_bcc, center_refinement * w_ocfr),
    )
    return LossBundle(backbone_global, aggregated_global, background_consistency,
                      center_refinement, w_bcc, w_ocfr, total)
