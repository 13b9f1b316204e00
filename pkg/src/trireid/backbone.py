"""Shared vision transformer over three image modalities.

One parameter set serves all modalities; only the class tokens differ per
modality. Every layer's per-head attention matrix is recorded (detached)
so token selection can run attention rollout afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .params import ParameterStore, truncated_normal

MODALITIES = ("rgb", "nir", "tir")


@dataclass
class BackboneConfig:
    """Geometry and capacity of the shared transformer.

    Desk-scale defaults: 64x32 inputs with 8-pixel patches give 32 patch
    tokens, embedding 64, four layers, four heads.
    """

    image_h: int = 64
    image_w: int = 32
    channels: int = 3
    patch: int = 8
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    use_camera_embedding: bool = True
    num_cameras: int = 2

    def __post_init__(self):
        if self.image_h % self.patch or self.image_w % self.patch:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} is not divisible by patch {self.patch}"
            )
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class TokenSequence:
    """Last-layer tokens for one image; row 0 is the class token."""

    tokens: Tensor  # (num_patches + 1, embed_dim)

    @property
    def class_token(self) -> Tensor:
        return ad.take(self.tokens, [0], axis=0)

    @property
    def patch_tokens(self) -> Tensor:
        n = self.tokens.shape[0]
        return ad.take(self.tokens, list(range(1, n)), axis=0)


@dataclass
class AttentionStack:
    """Per-layer, per-head attention for one image: (layers, heads, T, T)."""

    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise DimensionError(
                f"attention stack must be (layers, heads, T, T), got {self.weights.shape}"
            )


def patchify(img: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """Flatten one C x H x W image into raster-ordered patch rows."""
    return patchify_batch(img[None], cfg)[0]


def patchify_batch(imgs: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """(B, C, H, W) -> (B, num_patches, C*p*p), patches in row-major grid order."""
    imgs = np.asarray(imgs, dtype=np.float64)
    b, c, h, w = imgs.shape
    if (c, h, w) != (cfg.channels, cfg.image_h, cfg.image_w):
        raise DimensionError(
            f"image shape {(c, h, w)} does not match config "
            f"{(cfg.channels, cfg.image_h, cfg.image_w)}"
        )
    p = cfg.patch
    gh, gw = cfg.grid
    x = imgs.reshape(b, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gh, gw, C, p, p)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * p * p))


def init_backbone(store: ParameterStore, cfg: BackboneConfig,
                  rng: np.random.Generator, prefix: str = "backbone") -> None:
    """Register all backbone parameters: truncated-normal weights, zero biases."""
    d = cfg.embed_dim
    store.add(f"{prefix}/patch_embed/weight",
              truncated_normal(rng, (cfg.channels * cfg.patch * cfg.patch, d)))
    store.add(f"{prefix}/patch_embed/bias", np.zeros(d))
    store.add(f"{prefix}/pos_embed", truncated_normal(rng, (cfg.num_patches + 1, d)))
    for mod in MODALITIES:
        store.add(f"{prefix}/cls/{mod}", truncated_normal(rng, (1, d)))
    if cfg.use_camera_embedding:
        store.add(f"{prefix}/camera_embed", truncated_normal(rng, (cfg.num_cameras, d)))
    for i in range(cfg.layers):
        init_block(store, f"{prefix}/block{i}", d, cfg.mlp_dim, rng)
    store.add(f"{prefix}/final_ln/gain", np.ones(d))
    store.add(f"{prefix}/final_ln/bias", np.zeros(d))


def init_block(store: ParameterStore, prefix: str, dim: int, mlp_dim: int,
               rng: np.random.Generator) -> None:
    """One pre-norm transformer block: MHSA followed by a two-layer FFN."""
    store.add(f"{prefix}/ln1/gain", np.ones(dim))
    store.add(f"{prefix}/ln1/bias", np.zeros(dim))
    for proj in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}/attn/{proj}", truncated_normal(rng, (dim, dim)))
    for bias in ("bq", "bk", "bv", "bo"):
        store.add(f"{prefix}/attn/{bias}", np.zeros(dim))
    store.add(f"{prefix}/ln2/gain", np.ones(dim))
    store.add(f"{prefix}/ln2/bias", np.zeros(dim))
    store.add(f"{prefix}/mlp/w1", truncated_normal(rng, (dim, mlp_dim)))
    store.add(f"{prefix}/mlp/b1", np.zeros(mlp_dim))
    store.add(f"{prefix}/mlp/w2", truncated_normal(rng, (mlp_dim, dim)))
    store.add(f"{prefix}/mlp/b2", np.zeros(dim))


def transformer_block(store: ParameterStore, prefix: str, x: Tensor, heads: int,
                      key_block: np.ndarray | None = None,
                      recorded: list[np.ndarray] | None = None) -> Tensor:
    """Pre-norm block on (B, T, D) tokens.

    ``key_block`` is an optional boolean (B, T) array marking keys to exclude
    from attention (additive -1e30 on their logits). Appends the detached
    (B, heads, T, T) attention to ``recorded`` when given.
    """
    b, t, d = x.shape
    dh = d // heads

    h = ad.layer_norm(x, store[f"{prefix}/ln1/gain"], store[f"{prefix}/ln1/bias"])

    def split_heads(y: Tensor) -> Tensor:
        return y.reshape(b, t, heads, dh).transpose((0, 2, 1, 3))

    q = split_heads(ad.linear(h, store[f"{prefix}/attn/wq"], store[f"{prefix}/attn/bq"]))
    k = split_heads(ad.linear(h, store[f"{prefix}/attn/wk"], store[f"{prefix}/attn/bk"]))
    v = split_heads(ad.linear(h, store[f"{prefix}/attn/wv"], store[f"{prefix}/attn/bv"]))

    logits = ad.matmul(q, k.transpose()) * (1.0 / np.sqrt(dh))
    if key_block is not None:
        logits = ad.masked_fill(logits, key_block[:, None, None, :], -1e30)
    attn = ad.softmax_rows(logits)  # (B, heads, T, T)
    if recorded is not None:
        recorded.append(attn.data.copy())

    ctx = ad.matmul(attn, v).transpose((0, 2, 1, 3)).reshape(b, t, d)
    x = ad.add(x, ad.linear(ctx, store[f"{prefix}/attn/wo"], store[f"{prefix}/attn/bo"]))

    h2 = ad.layer_norm(x, store[f"{prefix}/ln2/gain"], store[f"{prefix}/ln2/bias"])
    ff = ad.linear(ad.gelu(ad.linear(h2, store[f"{prefix}/mlp/w1"], store[f"{prefix}/mlp/b1"])),
                   store[f"{prefix}/mlp/w2"], store[f"{prefix}/mlp/b2"])
    return ad.add(x, ff)


class Backbone:
    """Shared feature extractor; modality only selects the class token."""

    def __init__(self, store: ParameterStore, cfg: BackboneConfig,
                 prefix: str = "backbone"):
        self.store = store
        self.cfg = cfg
        self.prefix = prefix

    def forward_batch(self, imgs: np.ndarray, modality: str,
                      camera_ids=None) -> tuple[Tensor, np.ndarray]:
        """Run (B, C, H, W) images; returns (B, T, D) tokens and the detached
        (layers, B, heads, T, T) attention stack."""
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}, expected one of {MODALITIES}")
        cfg = self.cfg
        store = self.store
        patches = patchify_batch(imgs, cfg)
        b = patches.shape[0]

        x = ad.linear(ad.constant(patches), store[f"{self.prefix}/patch_embed/weight"],
                      store[f"{self.prefix}/patch_embed/bias"])
        cls = ad.broadcast_to(
            store[f"{self.prefix}/cls/{modality}"].reshape(1, 1, cfg.embed_dim),
            (b, 1, cfg.embed_dim),
        )
        x = ad.concat([cls, x], axis=1)  # class token at position 0
        x = ad.add(x, store[f"{self.prefix}/pos_embed"])

        if cfg.use_camera_embedding:
            if camera_ids is None:
                raise ConfigError("camera ids required when camera embeddings are enabled")
            ids = np.asarray(camera_ids, dtype=np.intp)
            if ids.min() < 0 or ids.max() >= cfg.num_cameras:
                raise ConfigError(
                    f"camera id out of range [0, {cfg.num_cameras}): {ids.tolist()}"
                )
            cam = ad.take(store[f"{self.prefix}/camera_embed"], ids, axis=0)
            x = ad.add(x, cam.reshape(b, 1, cfg.embed_dim))

        recorded: list[np.ndarray] = []
        for i in range(cfg.layers):
            x = transformer_block(store, f"{self.prefix}/block{i}", x, cfg.heads,
                                  recorded=recorded)
        x = ad.layer_norm(x, store[f"{self.prefix}/final_ln/gain"],
                          store[f"{self.prefix}/final_ln/bias"])
        return x, np.stack(recorded)  # (layers, B, heads, T, T)

    def forward(self, img: np.ndarray, modality: str,
                camera_id: int | None = None) -> tuple[TokenSequence, AttentionStack]:
        """Single-image surface over forward_batch."""
        cams = None if camera_id is None and not self.cfg.use_camera_embedding else [camera_id]
        tokens, stack = self.forward_batch(np.asarray(img)[None], modality, cams)
        seq = TokenSequence(tokens.reshape(tokens.shape[1], tokens.shape[2]))
        return seq, AttentionStack(stack[:, 0])
