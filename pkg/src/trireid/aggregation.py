"""Hierarchical masked aggregation of selected tokens.

Stage one runs each modality through a shared masked encoder so its class
token gathers the selected patches; stage two concatenates the three
sequences along the token axis and runs the same encoder so information
crosses modalities. Non-selected positions are zeroed at the input, blocked
as attention keys (default), and zeroed again at the output, so background
values can never leak into the retrieval feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import init_block, transformer_block
from .errors import ConfigError, ContractError, DimensionError
from .params import ParameterStore

MASK_MODES = ("additive", "zeroing")
FEATURE_MODES = ("averaged_patches", "class_only")


@dataclass
class AggregatorConfig:
    embed_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 2.0
    mask_mode: str = "additive"
    feature_mode: str = "averaged_patches"
    separate_encoders: bool = False  # ablation: distinct block per stage

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(
                f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}"
            )

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def feature_dim(self) -> int:
        return 6 * self.embed_dim if self.feature_mode == "averaged_patches" else 3 * self.embed_dim


def init_aggregator(store: ParameterStore, cfg: AggregatorConfig,
                    rng: np.random.Generator, prefix: str = "hma") -> None:
    init_block(store, f"{prefix}/encoder", cfg.embed_dim, cfg.mlp_dim, rng)
    if cfg.separate_encoders:
        init_block(store, f"{prefix}/encoder_joint", cfg.embed_dim, cfg.mlp_dim, rng)


class Aggregator:
    def __init__(self, store: ParameterStore, cfg: AggregatorConfig, prefix: str = "hma"):
        self.store = store
        self.cfg = cfg
        self.prefix = prefix

    def _encoder_prefix(self, joint: bool) -> str:
        if joint and self.cfg.separate_encoders:
            return f"{self.prefix}/encoder_joint"
        return f"{self.prefix}/encoder"

    @staticmethod
    def _allowed(tokens: Tensor, union_mask: np.ndarray) -> np.ndarray:
        """(B, T) keep-flags: class position plus selected patches."""
        b, t, _ = tokens.shape
        mask = np.asarray(union_mask, dtype=bool)
        if mask.shape != (b, t - 1):
            raise DimensionError(
                f"union mask shape {mask.shape} does not match {b} x {t - 1} patches"
            )
        if mask.sum(axis=1).min() < 1:
            raise ContractError("selection mask is empty for at least one sample")
        return np.concatenate([np.ones((b, 1), dtype=bool), mask], axis=1)

    def _encode(self, tokens: Tensor, allowed: np.ndarray, joint: bool) -> Tensor:
        keep = ad.constant(allowed[:, :, None].astype(np.float64))
        x = ad.mul(tokens, keep)  # zero non-selected values (class row kept)
        key_block = ~allowed if self.cfg.mask_mode == "additive" else None
        out = transformer_block(self.store, self._encoder_prefix(joint), x,
                                self.cfg.heads, key_block=key_block)
        return ad.mul(out, keep)  # downstream reads of non-selected rows see zeros

    def independent_aggregate(self, tokens: Tensor, union_mask: np.ndarray) -> Tensor:
        """One modality's (B, T, D) tokens through the masked encoder."""
        return self._encode(tokens, self._allowed(tokens, union_mask), joint=False)

    def collaborative_aggregate(self, agg_rgb: Tensor, agg_nir: Tensor, agg_tir: Tensor,
                                union_mask: np.ndarray) -> Tensor:
        """Concatenate the three aggregated sequences on the token axis and
        run the masked encoder jointly; output is (B, 3T, D)."""
        if not (agg_rgb.shape == agg_nir.shape == agg_tir.shape):
            raise DimensionError(
                f"aggregated sequences differ: {agg_rgb.shape}, {agg_nir.shape}, {agg_tir.shape}"
            )
        allowed = self._allowed(agg_rgb, union_mask)
        joined = ad.concat([agg_rgb, agg_nir, agg_tir], axis=1)
        allowed3 = np.concatenate([allowed, allowed, allowed], axis=1)
        return self._encode(joined, allowed3, joint=True)

    def final_feature(self, aggregated: Tensor, union_mask: np.ndarray,
                      feature_mode: str | None = None) -> Tensor:
        """Retrieval feature: the three class tokens, optionally each paired
        with the mean of its selected patch tokens."""
        mode = feature_mode or self.cfg.feature_mode
        if mode not in FEATURE_MODES:
            raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}, got {mode!r}")
        b, total, d = aggregated.shape
        if total % 3:
            raise DimensionError(f"joint sequence length {total} is not 3 blocks")
        t = total // 3
        cls_rows = [m * t for m in range(3)]
        if mode == "class_only":
            return aggregated.take(cls_rows, axis=1).reshape(b, 3 * d)

        mask = np.asarray(union_mask, dtype=np.float64)
        counts = mask.sum(axis=1, keepdims=True)
        weights = ad.constant((mask / counts)[:, None, :])  # (B, 1, N_p)
        pieces = []
        for m in range(3):
            cls = aggregated.take([m * t], axis=1)
            patches = aggregated.take(list(range(m * t + 1, (m + 1) * t)), axis=1)
            mean_selected = ad.matmul(weights, patches)  # (B, 1, D)
            pieces.extend([cls, mean_selected])
        return ad.concat(pieces, axis=1).reshape(b, 6 * d)

    def run(self, tokens_by_mod: dict[str, Tensor],
            union_mask: np.ndarray) -> tuple[dict[str, Tensor], Tensor, Tensor]:
        """Both stages plus the final feature.

        Returns (per-modality aggregated sequences, joint sequence, feature).
        """
        per_mod = {
            mod: self.independent_aggregate(tokens, union_mask)
            for mod, tokens in tokens_by_mod.items()
        }
        joint = self.collaborative_aggregate(
            per_mod["rgb"], per_mod["nir"], per_mod["tir"], union_mask
        )
        feature = self.final_feature(joint, union_mask)
        return per_mod, joint, feature
