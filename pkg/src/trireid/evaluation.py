"""Retrieval metrics (mAP, CMC Rank-K) and selection diagnostics.

The gallery is filtered per the usual retrieval protocol: items sharing both
identity and camera with the query are removed before ranking is scored.
Queries left without any valid positive are skipped and counted, not scored
as zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

METRICS = ("euclidean", "cosine")


def pairwise_dist(queries: np.ndarray, gallery: np.ndarray,
                  metric: str = "euclidean") -> np.ndarray:
    """(Q, D) x (G, D) -> (Q, G) distances."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise DimensionError(
            f"feature extents differ: {queries.shape} vs {gallery.shape}"
        )
    if metric == "euclidean":
        q2 = (queries ** 2).sum(axis=1)[:, None]
        g2 = (gallery ** 2).sum(axis=1)[None, :]
        d2 = np.maximum(q2 + g2 - 2.0 * queries @ gallery.T, 0.0)
        return np.sqrt(d2)
    if metric == "cosine":
        qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ gn.T
    raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")


@dataclass
class RankingResult:
    """Per query: filtered gallery order (ascending distance) and relevance flags."""

    orders: list[np.ndarray]
    relevance: list[np.ndarray]

    @property
    def n_queries(self) -> int:
        return len(self.orders)

    @property
    def n_skipped(self) -> int:
        return sum(1 for r in self.relevance if not r.any())


def build_ranking(dist: np.ndarray, query_ids, gallery_ids,
                  query_cams=None, gallery_cams=None,
                  camera_filter: bool = True) -> RankingResult:
    """Sort the gallery per query and apply the same-id-same-camera filter."""
    dist = np.asarray(dist, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    if dist.shape != (len(query_ids), len(gallery_ids)):
        raise DimensionError(
            f"distance matrix {dist.shape} does not match "
            f"{len(query_ids)} queries x {len(gallery_ids)} gallery items"
        )
    if gallery_ids.size == 0:
        raise ContractError("gallery is empty")
    if camera_filter:
        if query_cams is None or gallery_cams is None:
            raise ConfigError("camera ids required when the protocol filter is on")
        query_cams = np.asarray(query_cams)
        gallery_cams = np.asarray(gallery_cams)

    orders, relevance = [], []
    for qi in range(len(query_ids)):
        order = np.argsort(dist[qi], kind="stable")
        if camera_filter:
            junk = (gallery_ids[order] == query_ids[qi]) & (gallery_cams[order] == query_cams[qi])
            order = order[~junk]
        orders.append(order)
        relevance.append(gallery_ids[order] == query_ids[qi])
    return RankingResult(orders, relevance)


def average_precision(relevance: np.ndarray) -> float:
    """AP over one ranked relevance sequence (must contain a positive)."""
    relevance = np.asarray(relevance, dtype=bool)
    if not relevance.any():
        raise ContractError("average precision needs at least one relevant item")
    positions = np.flatnonzero(relevance) + 1  # 1-based ranks
    hits = np.arange(1, len(positions) + 1)
    return float((hits / positions).mean())


def compute_map(ranking: RankingResult) -> float:
    """Mean AP over queries that kept at least one valid positive."""
    aps = [average_precision(r) for r in ranking.relevance if r.any()]
    if not aps:
        raise ContractError("no query has a valid relevant gallery item")
    return float(np.mean(aps))


def compute_cmc(ranking: RankingResult, ks=(1, 5, 10)) -> dict[int, float]:
    """Fraction of (non-skipped) queries with a hit in the top k."""
    firsts = [int(np.flatnonzero(r)[0]) for r in ranking.relevance if r.any()]
    if not firsts:
        raise ContractError("no query has a valid relevant gallery item")
    firsts = np.asarray(firsts)
    return {int(k): float((firsts < k).mean()) for k in ks}


def evaluate_features(query_feats, query_ids, query_cams,
                      gallery_feats, gallery_ids, gallery_cams,
                      metric: str = "euclidean", camera_filter: bool = True,
                      ks=(1, 5, 10)) -> dict:
    """Distance, ranking, and the summary report in one call."""
    dist = pairwise_dist(query_feats, gallery_feats, metric)
    ranking = build_ranking(dist, query_ids, gallery_ids, query_cams, gallery_cams,
                            camera_filter=camera_filter)
    cmc = compute_cmc(ranking, ks)
    return {
        "map": compute_map(ranking),
        **{f"rank{k}": cmc[k] for k in ks},
        "n_queries": ranking.n_queries,
        "n_skipped": ranking.n_skipped,
    }


# ---------------------------------------------------------------------------
# Selection diagnostics
# ---------------------------------------------------------------------------


def foreground_token_mask(fg_mask: np.ndarray, patch: int) -> np.ndarray:
    """Patches with at least half their pixels on the foreground, raster order."""
    fg = np.asarray(fg_mask, dtype=bool)
    h, w = fg.shape
    if h % patch or w % patch:
        raise DimensionError(f"mask {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    frac = fg.reshape(gh, patch, gw, patch).mean(axis=(1, 3))
    return (frac >= 0.5).reshape(-1)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def selection_iou(selected: np.ndarray, fg_mask: np.ndarray, patch: int) -> float:
    """IoU of the selected-token mask against ground-truth foreground tokens."""
    return mask_iou(selected, foreground_token_mask(fg_mask, patch))


def expected_random_iou(n_tokens: int, popcount: int, gt_count: int) -> float:
    """E[IoU] of a uniformly random mask of fixed popcount against a fixed
    ground-truth set, by exact hypergeometric enumeration."""
    if gt_count == 0:
        return 1.0 if popcount == 0 else 0.0
    total = comb(n_tokens, popcount)
    expectation = 0.0
    lo = max(0, popcount + gt_count - n_tokens)
    hi = min(popcount, gt_count)
    for overlap in range(lo, hi + 1):
        ways = comb(gt_count, overlap) * comb(n_tokens - gt_count, popcount - overlap)
        iou = overlap / (popcount + gt_count - overlap)
        expectation += ways / total * iou
    return expectation


def epoch_mask_iou(masks_before: dict[str, np.ndarray],
                   masks_after: dict[str, np.ndarray]) -> float:
    """Mean per-sample IoU of selection masks across two adjacent epochs."""
    if set(masks_before) != set(masks_after):
        raise ContractError("epoch mask sets cover different samples")
    if not masks_before:
        raise ContractError("no masks to compare")
    ious = [mask_iou(masks_before[k], masks_after[k]) for k in sorted(masks_before)]
    return float(np.mean(ious))
