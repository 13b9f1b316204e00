"""Command-line entry points: gen-data, train, eval, visualize.

Configuration precedence: command-line flag > config file > built-in
default; the env var EDITOR_SEED, when set, overrides the seed above all.
The effective configuration is echoed into the output directory.
Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Manifest, generate_dataset, load_sample
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    NumericFailure,
    ParseError,
)
from .netpbm import write_pgm, write_ppm
from .selection import SelectionMasks, frequency_saliency, write_mask_dump
from .training import TrainConfig, Trainer, apply_preset, train_run
from .visualize import overlay_selected, saliency_image


@dataclass
class RunConfig:
    """Flat bag of every knob with its default; unknown keys are rejected."""

    # shared
    seed: int = 0
    out: str = "runs/latest"
    manifest: str = "corpus/manifest.jsonl"
    checkpoint: str = ""
    # corpus generation
    ids: int = 16
    per_id: int = 16
    cameras: int = 2
    height: int = 64
    width: int = 32
    # optimization
    preset: str = "F"
    lr_base: float = 0.001
    warmup_iters: int = 100
    total_iters: int = 2000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ids_per_batch: int = 4
    instances_per_id: int = 4
    spatial_keep: int = 2
    freq_keep: int = 10
    dhwt_levels: int = 4
    center_decay: float = 0.8
    w_bcc: float = 1.0
    w_ocfr: float = 1.0
    hma_feature_mode: str = "averaged_patches"
    eval_every: int = 0
    label_smoothing: float = 0.1
    triplet_margin: float = 0.3
    mask_mode: str = "additive"
    rollout_layers: int = 0
    separate_encoders: bool = False
    # evaluation
    metric: str = "euclidean"
    camera_filter: bool = True
    # visualization
    samples: str = ""


_BOOL_WORDS = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def _coerce(raw: str, kind: type):
    if kind is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    try:
        return kind(raw)
    except ValueError as e:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}") from e


def parse_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` file; # starts a comment."""
    kinds = {f.name: type(f.default) for f in fields(RunConfig)}
    values = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{path}:{n}: unknown config key {key!r}")
        values[key] = _coerce(raw, kinds[key])
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config file, then flags, then EDITOR_SEED."""
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in parse_config_file(args.config).items():
            setattr(cfg, key, value)
    for f in fields(RunConfig):
        flag_value = getattr(args, f.name, None)
        if flag_value is not None:
            setattr(cfg, f.name, flag_value)
    env_seed = os.environ.get("EDITOR_SEED")
    if env_seed is not None:
        cfg.seed = _coerce(env_seed, int)
    return cfg


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {value}" for key, value in asdict(cfg).items()]
    (out_dir / "effective_config.txt").write_text("\n".join(lines) + "\n",
                                                  encoding="utf-8")


def build_train_config(cfg: RunConfig) -> TrainConfig:
    base = TrainConfig(
        lr_base=cfg.lr_base, warmup_iters=cfg.warmup_iters, total_iters=cfg.total_iters,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay, seed=cfg.seed,
        ids_per_batch=cfg.ids_per_batch, instances_per_id=cfg.instances_per_id,
        spatial_keep=cfg.spatial_keep, freq_keep=cfg.freq_keep,
        dhwt_levels=cfg.dhwt_levels, center_decay=cfg.center_decay,
        w_bcc=cfg.w_bcc, w_ocfr=cfg.w_ocfr, hma_feature_mode=cfg.hma_feature_mode,
        eval_every=cfg.eval_every, label_smoothing=cfg.label_smoothing,
        triplet_margin=cfg.triplet_margin, mask_mode=cfg.mask_mode,
        rollout_layers=cfg.rollout_layers, separate_encoders=cfg.separate_encoders,
    )
    return apply_preset(base, cfg.preset)


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    manifest = generate_dataset(cfg.seed, cfg.ids, cfg.per_id, cfg.cameras,
                                cfg.height, cfg.width, out)
    echo_config(cfg, out)
    counts = {s: len(manifest.split(s)) for s in ("train", "query", "gallery")}
    print(json.dumps({"records": len(manifest.records), **counts,
                      "out": str(out)}, sort_keys=True))
    return 0


def cmd_train(cfg: RunConfig) -> int:
    manifest_path = _require_file(cfg.manifest, "manifest")
    out = Path(cfg.out)
    echo_config(cfg, out)
    train_cfg = build_train_config(cfg)
    resume = cfg.checkpoint or None
    if resume:
        _require_file(resume, "checkpoint")
    trainer, summary = train_run(manifest_path, train_cfg, out, resume=resume)
    print(json.dumps({"iterations": summary["iterations"],
                      "checkpoint": str(out / "checkpoint.edtr"),
                      "metrics": str(trainer.metrics_path)}, sort_keys=True))
    return 0


def _restore_trainer(cfg: RunConfig) -> Trainer:
    manifest_path = _require_file(cfg.manifest, "manifest")
    ckpt = _require_file(cfg.checkpoint, "checkpoint")
    manifest = Manifest.load(manifest_path)
    trainer = Trainer(manifest, manifest_path.parent, build_train_config(cfg),
                      Path(cfg.out))
    trainer.load_checkpoint(ckpt)
    return trainer


def cmd_eval(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    trainer = _restore_trainer(cfg)
    echo_config(cfg, out)
    report = trainer.evaluate(metric=cfg.metric, camera_filter=cfg.camera_filter)
    (out / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_visualize(cfg: RunConfig) -> int:
    if not cfg.samples:
        raise ConfigError("pass --samples with a comma-separated list of sample ids")
    out = Path(cfg.out)
    trainer = _restore_trainer(cfg)
    echo_config(cfg, out)
    manifest = trainer.manifest
    by_key = {Path(r.path).name: r for r in manifest.records}
    wanted = [s.strip() for s in cfg.samples.split(",") if s.strip()]
    unknown = [k for k in wanted if k not in by_key]
    if unknown:
        raise ConfigError(f"unknown sample ids: {unknown}")

    model = trainer.model
    patch = trainer.backbone_cfg.patch
    dump_rows = []
    for key in wanted:
        sample = load_sample(trainer.root, by_key[key])
        imgs = {m: sample.images[m][None] for m in sample.images}
        fwd = model.forward(imgs, [sample.camera])
        masks = fwd.masks
        for mod in sample.images:
            for kind, bits in (("spatial", masks.spatial[0]),
                               ("frequency", masks.frequency[0]),
                               ("union", masks.union[0])):
                overlay = overlay_selected(sample.images[mod], bits, patch)
                write_ppm(out / f"{key}_{mod}_{kind}.ppm", overlay)
        sal = frequency_saliency([sample.images[m] for m in ("rgb", "nir", "tir")],
                                 trainer.cfg.dhwt_levels)
        write_pgm(out / f"{key}_saliency.pgm", saliency_image(sal))
        dump_rows.append((key, masks))

    write_mask_dump(
        out / "masks.txt",
        [k for k, _ in dump_rows],
        SelectionMasks(
            np.stack([m.spatial[0] for _, m in dump_rows]),
            np.stack([m.frequency[0] for _, m in dump_rows]),
            np.stack([m.union[0] for _, m in dump_rows]),
            np.stack([m.background[0] for _, m in dump_rows]),
        ),
    )
    print(json.dumps({"samples": wanted, "out": str(out)}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trireid",
        description="Tri-modal re-identification: data synthesis, training, "
                    "retrieval evaluation, and token-selection visualization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    g = sub.add_parser("gen-data", help="render the synthetic corpus")
    add_common(g)
    g.add_argument("--ids", type=int, help="number of identities")
    g.add_argument("--per-id", dest="per_id", type=int, help="samples per identity")
    g.add_argument("--cameras", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--width", type=int)

    t = sub.add_parser("train", help="optimize a model on a manifest")
    add_common(t)
    t.add_argument("--manifest")
    t.add_argument("--checkpoint", help="resume from this checkpoint")
    t.add_argument("--preset", choices=list("ABCDEF"),
                   help="ablation row: A baseline .. F full pipeline")
    t.add_argument("--iters", dest="total_iters", type=int)
    t.add_argument("--warmup", dest="warmup_iters", type=int)
    t.add_argument("--lr", dest="lr_base", type=float)
    t.add_argument("--p", dest="ids_per_batch", type=int, help="identities per batch")
    t.add_argument("--k", dest="instances_per_id", type=int, help="instances per identity")
    t.add_argument("--s", dest="spatial_keep", type=int, help="tokens kept per head")
    t.add_argument("--f", dest="freq_keep", type=int, help="tokens kept by saliency")
    t.add_argument("--alpha", dest="center_decay", type=float, help="center EMA decay")
    t.add_argument("--w-bcc", dest="w_bcc", type=float)
    t.add_argument("--w-ocfr", dest="w_ocfr", type=float)
    t.add_argument("--levels", dest="dhwt_levels", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int,
                   help="evaluate every N epochs during training")

    e = sub.add_parser("eval", help="retrieval metrics from a checkpoint")
    add_common(e)
    e.add_argument("--manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--preset", choices=list("ABCDEF"),
                   help="must match the checkpointed architecture")
    e.add_argument("--metric", choices=["euclidean", "cosine"])
    e.add_argument("--no-camera-filter", dest="camera_filter",
                   action="store_const", const=False)

    v = sub.add_parser("visualize", help="dump selection overlays for samples")
    add_common(v)
    v.add_argument("--manifest")
    v.add_argument("--checkpoint")
    v.add_argument("--preset", choices=list("ABCDEF"))
    v.add_argument("--samples", help="comma-separated sample ids (e.g. id001_s002)")

    return parser


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return _DISPATCH[args.command](cfg)
    except NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ParseError, ContractError, DimensionError,
            FileNotFoundError, NotADirectoryError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
