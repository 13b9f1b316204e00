"""Optimization loop: SGD with momentum, warmup-cosine schedule, per-step
center updates, epoch-boundary mask tracking, checkpointing, JSONL metrics.

Randomness is counter-based: every batch and augmentation draws from a
generator seeded by (seed, iteration, position), so a resumed run replays
exactly the same stream as an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .aggregation import Aggregator, AggregatorConfig, init_aggregator
from .autodiff import GradientTape, Tensor, backward
from .backbone import MODALITIES, Backbone, BackboneConfig, init_backbone
from .checkpoint import load_arrays, save_arrays
from .data import Manifest, ManifestRecord, Sample, augment, load_sample, pk_sample_batch
from .errors import ConfigError, ContractError, NumericFailure
from .evaluation import (
    epoch_mask_iou,
    evaluate_features,
    selection_iou,
)
from .losses import (
    IdentityCenters,
    LossBundle,
    batch_hard_triplet,
    bcc_loss,
    ce_label_smooth,
    ocfr_loss,
    ocfr_update,
)
from .params import ParameterStore, truncated_normal
from .selection import (
    SelectionConfig,
    SelectionMasks,
    frequency_saliency,
    select_frequency,
    select_tokens_batch,
)


@dataclass
class TrainConfig:
    """Knobs for one training run; defaults mirror the reference recipe."""

    lr_base: float = 0.001
    warmup_iters: int = 100
    total_iters: int = 2000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    ids_per_batch: int = 4          # paper scale uses 8
    instances_per_id: int = 4       # paper scale uses 16
    spatial_keep: int = 2           # top tokens per attention head
    freq_keep: int = 10             # top tokens by wavelet saliency
    dhwt_levels: int = 4
    center_decay: float = 0.8
    w_bcc: float = 1.0
    w_ocfr: float = 1.0
    hma_feature_mode: str = "averaged_patches"
    eval_every: int = 0             # retrieval eval every N epochs; 0 = end only
    use_sfts: bool = True
    use_hma: bool = True
    use_bcc: bool = True
    use_ocfr: bool = True
    label_smoothing: float = 0.1
    triplet_margin: float = 0.3
    mask_mode: str = "additive"
    rollout_layers: int = 0         # 0 = integrate all layers
    separate_encoders: bool = False


# Ablation rows: which components each preset enables.
PRESETS: dict[str, dict[str, bool]] = {
    "A": dict(use_sfts=False, use_hma=False, use_bcc=False, use_ocfr=False),
    "B": dict(use_sfts=False, use_hma=True, use_bcc=False, use_ocfr=False),
    "C": dict(use_sfts=True, use_hma=True, use_bcc=False, use_ocfr=False),
    "D": dict(use_sfts=True, use_hma=True, use_bcc=True, use_ocfr=False),
    "E": dict(use_sfts=True, use_hma=True, use_bcc=False, use_ocfr=True),
    "F": dict(use_sfts=True, use_hma=True, use_bcc=True, use_ocfr=True),
}


def apply_preset(cfg: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    return replace(cfg, **PRESETS[preset])


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_base, then cosine decay to lr_base/100."""
    if not 0 <= iteration < cfg.total_iters:
        raise ContractError(
            f"iteration {iteration} outside [0, {cfg.total_iters})"
        )
    if iteration < cfg.warmup_iters:
        return cfg.lr_base * (iteration + 1) / cfg.warmup_iters
    lr_min = cfg.lr_base / 100.0
    span = max(1, cfg.total_iters - 1 - cfg.warmup_iters)
    progress = (iteration - cfg.warmup_iters) / span
    return lr_min + 0.5 * (cfg.lr_base - lr_min) * (1.0 + np.cos(np.pi * progress))


def excluded_from_decay(name: str) -> bool:
    """Biases, norm affines, class tokens, and position embeddings skip L2."""
    if name.endswith(("/bias", "/b1", "/b2", "/bq", "/bk", "/bv", "/bo")):
        return True
    if "/ln1/" in name or "/ln2/" in name or "final_ln" in name:
        return True
    return "/cls/" in name or name.endswith("pos_embed")


class SGDMomentum:
    """v := momentum*v + g + wd*theta; theta := theta - lr*v."""

    def __init__(self, store: ParameterStore, momentum: float, weight_decay: float):
        self.store = store
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.data) for name, t in store.items()}

    def step(self, grads: dict[Tensor, np.ndarray], lr: float) -> None:
        for name, param in self.store.items():
            g = grads.get(param)
            if g is None:
                raise ContractError(f"missing gradient for parameter {name}")
            if self.weight_decay and not excluded_from_decay(name):
                g = g + self.weight_decay * param.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            param.data -= lr * v

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {f"opt/{name}": v for name, v in self.velocity.items()}

    def load_named_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            key = name.removeprefix("opt/")
            if key not in self.velocity:
                raise ConfigError(f"unknown optimizer state {name}")
            self.velocity[key][...] = arr


@dataclass
class ForwardResult:
    tokens: dict[str, Tensor]          # (B, T, D) per modality
    class_tokens: dict[str, Tensor]    # (B, D) per modality
    masks: SelectionMasks
    agg_class_tokens: dict[str, Tensor] | None
    feature: Tensor                    # retrieval feature (B, F)


class Model:
    """Backbone, optional aggregator, and the classifier heads."""

    def __init__(self, backbone_cfg: BackboneConfig, cfg: TrainConfig, n_classes: int):
        self.backbone_cfg = backbone_cfg
        self.cfg = cfg
        self.n_classes = n_classes
        self.store = ParameterStore()
        rng = np.random.default_rng([cfg.seed, 11])
        init_backbone(self.store, backbone_cfg, rng)
        self.backbone = Backbone(self.store, backbone_cfg)
        d = backbone_cfg.embed_dim

        if cfg.use_hma:
            agg_cfg = AggregatorConfig(
                embed_dim=d, heads=backbone_cfg.heads, mlp_ratio=backbone_cfg.mlp_ratio,
                mask_mode=cfg.mask_mode, feature_mode=cfg.hma_feature_mode,
                separate_encoders=cfg.separate_encoders,
            )
            init_aggregator(self.store, agg_cfg, rng)
            self.aggregator = Aggregator(self.store, agg_cfg)
            feat_dim = agg_cfg.feature_dim
        else:
            self.aggregator = None
            feat_dim = 3 * d

        self.store.add("heads/backbone_classifier/weight",
                       truncated_normal(rng, (d, n_classes)))
        self.store.add("heads/backbone_classifier/bias", np.zeros(n_classes))
        if cfg.use_hma:
            self.store.add("heads/feature_classifier/weight",
                           truncated_normal(rng, (feat_dim, n_classes)))
            self.store.add("heads/feature_classifier/bias", np.zeros(n_classes))
        self.selection_cfg = SelectionConfig(
            spatial_keep=cfg.spatial_keep, freq_keep=cfg.freq_keep,
            levels=cfg.dhwt_levels, rollout_layers=cfg.rollout_layers,
        )

    def forward(self, imgs: dict[str, np.ndarray], camera_ids) -> ForwardResult:
        """Full pipeline on a batch of sample triples."""
        n_p = self.backbone_cfg.num_patches
        tokens: dict[str, Tensor] = {}
        stacks: dict[str, np.ndarray] = {}
        for mod in MODALITIES:
            normalized = imgs[mod] * 2.0 - 1.0
            tokens[mod], stacks[mod] = self.backbone.forward_batch(
                normalized, mod, camera_ids
            )
        b = next(iter(tokens.values())).shape[0]

        if self.cfg.use_sfts:
            masks = select_tokens_batch(stacks, imgs, self.backbone_cfg.patch,
                                        self.selection_cfg)
        else:
            ones = np.ones((b, n_p), dtype=bool)
            masks = SelectionMasks(ones, ones.copy(), ones.copy(),
                                   np.zeros((b, n_p), dtype=bool))

        class_tokens = {
            mod: tokens[mod].take([0], axis=1).reshape(b, self.backbone_cfg.embed_dim)
            for mod in MODALITIES
        }

        if self.aggregator is not None:
            per_mod, _, feature = self.aggregator.run(tokens, masks.union)
            agg_class = {
                mod: per_mod[mod].take([0], axis=1).reshape(b, self.backbone_cfg.embed_dim)
                for mod in MODALITIES
            }
        else:
            agg_class = None
            feature = ad.concat([class_tokens[m] for m in MODALITIES], axis=1)

        return ForwardResult(tokens, class_tokens, masks, agg_class, feature)

    def backbone_logits(self, class_token: Tensor) -> Tensor:
        return ad.linear(class_token, self.store["heads/backbone_classifier/weight"],
                         self.store["heads/backbone_classifier/bias"])

    def feature_logits(self, feature: Tensor) -> Tensor:
        return ad.linear(feature, self.store["heads/feature_classifier/weight"],
                         self.store["heads/feature_classifier/bias"])


class Trainer:
    """Owns the model, data streams, optimizer state, and logs for one run."""

    def __init__(self, manifest: Manifest, root: str | Path, cfg: TrainConfig,
                 out_dir: str | Path):
        self.manifest = manifest
        self.root = Path(root)
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        train_ids = manifest.identities("train")
        if len(train_ids) < 2:
            raise ContractError("training needs at least 2 identities")
        self.label_of = {identity: i for i, identity in enumerate(train_ids)}
        n_cameras = max(r.camera for r in manifest.records) + 1

        probe = load_sample(self.root, manifest.split("train")[0])
        c, h, w = probe.images["rgb"].shape
        self.backbone_cfg = BackboneConfig(
            image_h=h, image_w=w, channels=c, num_cameras=n_cameras,
        )
        self.model = Model(self.backbone_cfg, cfg, n_classes=len(train_ids))
        self.centers = IdentityCenters(decay=cfg.center_decay)
        self.optimizer = SGDMomentum(self.model.store, cfg.momentum, cfg.weight_decay)
        self.iteration = 0
        self.metrics_path = self.out_dir / "metrics.jsonl"
        self.mask_iou_history: list[float] = []
        self._prev_epoch_masks: dict[str, np.ndarray] | None = None
        self.last_tape_records = 0
        self._sample_cache: dict[str, Sample] = {}
        self._freq_mask_cache: dict[str, np.ndarray] = {}

        n_train = len(manifest.split("train"))
        self.iters_per_epoch = max(1, n_train // (cfg.ids_per_batch * cfg.instances_per_id))

    def _get_sample(self, record: ManifestRecord):
        cached = self._sample_cache.get(record.path)
        if cached is None:
            cached = load_sample(self.root, record)
            self._sample_cache[record.path] = cached
        return cached

    # -- data ------------------------------------------------------------
    def _load_batch(self, iteration: int):
        records = pk_sample_batch(self.manifest, self.cfg.ids_per_batch,
                                  self.cfg.instances_per_id,
                                  seed=[self.cfg.seed, iteration, 1])
        samples = [
            augment(self._get_sample(rec), seed=[self.cfg.seed, iteration, 2, j])
            for j, rec in enumerate(records)
        ]
        imgs = {
            mod: np.stack([s.images[mod] for s in samples]) for mod in MODALITIES
        }
        labels = np.array([self.label_of[s.identity] for s in samples])
        cameras = [s.camera for s in samples]
        keys = [s.key for s in samples]
        return imgs, labels, cameras, keys

    # -- one optimization step --------------------------------------------
    def train_step(self, iteration: int) -> dict:
        cfg = self.cfg
        imgs, labels, cameras, keys = self._load_batch(iteration)
        zero = ad.constant(np.zeros(()))

        with GradientTape() as tape:
            out = self.model.forward(imgs, cameras)

            ce_terms = [
                ce_label_smooth(self.model.backbone_logits(out.class_tokens[m]),
                                labels, cfg.label_smoothing)
                for m in MODALITIES
            ]
            ce_vit = ad.add(ad.add(ce_terms[0], ce_terms[1]), ce_terms[2]) * (1.0 / 3.0)
            if self.model.aggregator is None:
                # the retrieval feature already is the class-token concat
                joint_cls = out.feature
            else:
                joint_cls = ad.concat([out.class_tokens[m] for m in MODALITIES], axis=1)
            tri_vit = batch_hard_triplet(joint_cls, labels, cfg.triplet_margin)
            l_vit = ad.add(ce_vit, tri_vit)
            total = l_vit

            if self.model.aggregator is not None:
                ce_hma = ce_label_smooth(self.model.feature_logits(out.feature),
                                         labels, cfg.label_smoothing)
                tri_hma = batch_hard_triplet(out.feature, labels, cfg.triplet_margin)
                l_hma = ad.add(ce_hma, tri_hma)
                total = ad.add(total, l_hma)
            else:
                l_hma = zero

            if cfg.use_bcc:
                n_p = self.backbone_cfg.num_patches
                patch_feats = [
                    out.tokens[m].take(list(range(1, n_p + 1)), axis=1)
                    for m in MODALITIES
                ]
                l_bcc = bcc_loss(*patch_feats, out.masks.background)
                total = ad.add(total, l_bcc * cfg.w_bcc)
            else:
                l_bcc = zero

            if cfg.use_ocfr:
                pull_tokens = out.agg_class_tokens or out.class_tokens
                detached = {m: t.data.copy() for m, t in pull_tokens.items()}
                ocfr_update(self.centers, detached, labels)
                l_ocfr = ocfr_loss(self.centers, pull_tokens, labels)
                total = ad.add(total, l_ocfr * cfg.w_ocfr)
            else:
                l_ocfr = zero

            bundle = LossBundle(l_vit, l_hma, l_bcc, l_ocfr,
                                cfg.w_bcc, cfg.w_ocfr, total)

        values = bundle.values()
        if not all(np.isfinite(v) for v in values.values()):
            dump = self.out_dir / "nan_dump.json"
            dump.write_text(json.dumps({"iteration": iteration, "batch": keys,
                                        "losses": values}, indent=2))
            raise NumericFailure(
                f"non-finite loss at iteration {iteration}; batch dumped to {dump}"
            )

        grads = backward(bundle.total, tape)
        self.last_tape_records = tape.num_records()
        lr = lr_schedule(iteration, cfg)
        self.optimizer.step(grads, lr)

        record = {"iter": iteration, "lr": lr, **values,
                  "n_r_mean": float(out.masks.reserved_counts.mean())}
        return record

    # -- epoch-level mask tracking ----------------------------------------
    def _frequency_mask_of(self, sample) -> np.ndarray:
        """Wavelet masks of un-augmented samples never change; compute once."""
        cached = self._freq_mask_cache.get(sample.key)
        if cached is None:
            sal = frequency_saliency([sample.images[m] for m in MODALITIES],
                                     self.cfg.dhwt_levels)
            cached = select_frequency(sal, self.backbone_cfg.patch, self.cfg.freq_keep)
            self._freq_mask_cache[sample.key] = cached
        return cached

    def _train_masks(self) -> dict[str, np.ndarray]:
        """Selection masks for every distinct train sample, no augmentation.

        Runs the backbone only; the aggregator never influences selection.
        """
        masks: dict[str, np.ndarray] = {}
        records = self.manifest.split("train")
        for chunk_start in range(0, len(records), 32):
            chunk = records[chunk_start:chunk_start + 32]
            samples = [self._get_sample(r) for r in chunk]
            imgs = {m: np.stack([s.images[m] for s in samples]) for m in MODALITIES}
            cameras = [s.camera for s in samples]
            stacks = {
                m: self.backbone_forward_stack(imgs[m], m, cameras) for m in MODALITIES
            }
            freq = np.stack([self._frequency_mask_of(s) for s in samples])
            sel = select_tokens_batch(stacks, imgs, self.backbone_cfg.patch,
                                      self.model.selection_cfg, frequency=freq)
            for s, row in zip(samples, sel.union):
                masks[s.key] = row.copy()
        return masks

    def backbone_forward_stack(self, imgs: np.ndarray, modality: str,
                               cameras) -> np.ndarray:
        _, stack = self.model.backbone.forward_batch(imgs * 2.0 - 1.0, modality, cameras)
        return stack

    def end_epoch(self) -> float | None:
        """Track adjacent-epoch stability of the selection; None when SFTS is off."""
        if not self.cfg.use_sfts:
            return None
        current = self._train_masks()
        iou = None
        if self._prev_epoch_masks is not None:
            iou = epoch_mask_iou(self._prev_epoch_masks, current)
            self.mask_iou_history.append(iou)
        self._prev_epoch_masks = current
        return iou

    def train_epoch(self) -> list[dict]:
        """One pass worth of iterations plus the mask-stability probe."""
        boundary = min(self.iteration + self.iters_per_epoch, self.cfg.total_iters)
        records = []
        while self.iteration < boundary:
            records.append(self.train_step(self.iteration))
            self.iteration += 1
        iou = self.end_epoch()
        if iou is not None and records:
            records[-1]["epoch_mask_iou"] = iou
        return records

    # -- full run ----------------------------------------------------------
    def run(self) -> dict:
        mode = "a" if self.iteration else "w"
        epoch = 0
        with self.metrics_path.open(mode, encoding="utf-8") as log:
            while self.iteration < self.cfg.total_iters:
                for record in self.train_epoch():
                    log.write(json.dumps(record, sort_keys=True) + "\n")
                epoch += 1
                if (self.cfg.eval_every and epoch % self.cfg.eval_every == 0
                        and self.iteration < self.cfg.total_iters):
                    report = self.evaluate()
                    log.write(json.dumps({"iter": self.iteration, "eval": report},
                                         sort_keys=True) + "\n")
        self.save_checkpoint(self.out_dir / "checkpoint.edtr")
        return {"iterations": self.iteration,
                "mask_iou_history": list(self.mask_iou_history)}

    # -- evaluation ---------------------------------------------------------
    def _extract_features(self, records: list[ManifestRecord]):
        feats, ids, cams, ious = [], [], [], []
        for start in range(0, len(records), 32):
            chunk = records[start:start + 32]
            samples = [self._get_sample(r) for r in chunk]
            imgs = {m: np.stack([s.images[m] for s in samples]) for m in MODALITIES}
            out = self.model.forward(imgs, [s.camera for s in samples])
            feats.append(out.feature.data)
            ids.extend(s.identity for s in samples)
            cams.extend(s.camera for s in samples)
            if self.cfg.use_sfts:
                for s, row in zip(samples, out.masks.union):
                    ious.append(selection_iou(row, s.fg_mask, self.backbone_cfg.patch))
        features = np.concatenate(feats)
        norms = np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
        return features / norms, np.array(ids), np.array(cams), ious

    def evaluate(self, metric: str = "euclidean", camera_filter: bool = True) -> dict:
        query = self.manifest.split("query")
        gallery = self.manifest.split("gallery")
        if not query or not gallery:
            raise ContractError("manifest lacks query/gallery splits")
        qf, qi, qc, q_ious = self._extract_features(query)
        gf, gi, gc, g_ious = self._extract_features(gallery)
        report = evaluate_features(qf, qi, qc, gf, gi, gc,
                                   metric=metric, camera_filter=camera_filter)
        sel = q_ious + g_ious
        report["selection_iou_mean"] = float(np.mean(sel)) if sel else None
        report["epoch_mask_iou"] = (
            self.mask_iou_history[-1] if self.mask_iou_history else None
        )
        return report

    # -- checkpointing -------------------------------------------------------
    def save_checkpoint(self, path: str | Path) -> None:
        arrays: dict[str, np.ndarray] = {}
        for name, arr in self.model.store.named_arrays().items():
            arrays[f"param/{name}"] = arr
        arrays.update(self.optimizer.named_arrays())
        arrays.update(self.centers.named_arrays())
        arrays["meta/iteration"] = np.asarray(float(self.iteration))
        save_arrays(path, arrays)

    def load_checkpoint(self, path: str | Path) -> None:
        arrays = load_arrays(path)
        params, opt, centers = {}, {}, {}
        iteration = None
        for name, arr in arrays.items():
            if name.startswith("param/"):
                params[name.removeprefix("param/")] = arr
            elif name.startswith("opt/"):
                opt[name] = arr
            elif name.startswith("centers/"):
                centers[name] = arr
            elif name == "meta/iteration":
                iteration = int(arr.reshape(()))
            else:
                raise ConfigError(f"unknown array name in checkpoint: {name}")
        if iteration is None:
            raise ConfigError("checkpoint is missing meta/iteration")
        self.model.store.load_arrays(params)
        self.optimizer.load_named_arrays(opt)
        self.centers.load_named_arrays(centers)
        self.iteration = iteration
        if self.cfg.use_sfts and self.iteration:
            # rebuild the reference masks so resumed stability tracking matches
            self._prev_epoch_masks = self._train_masks()


def train_run(manifest_path: str | Path, cfg: TrainConfig, out_dir: str | Path,
              resume: str | Path | None = None) -> tuple[Trainer, dict]:
    """Load the manifest, train to completion, and return the trainer + summary."""
    manifest_path = Path(manifest_path)
    manifest = Manifest.load(manifest_path)
    trainer = Trainer(manifest, manifest_path.parent, cfg, out_dir)
    if resume is not None:
        trainer.load_checkpoint(resume)
    summary = trainer.run()
    return trainer, summary
