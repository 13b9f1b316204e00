"""Synthetic tri-modal corpus with ground-truth foreground masks.

Each identity is a parameterized glyph: a shape (ellipse, box, diamond,
ring) with its own size, home position, colors, stripe texture, infrared
response, and heat level. Samples jitter the geometry and draw a fresh
cluttered background, so the identity signal lives only in the foreground.
The three modalities share geometry but differ in appearance: pseudo-NIR is
a nonlinear grayscale of the foreground over independent clutter, pseudo-TIR
renders the glyph hot over a cool background. Cameras apply global
photometric shifts. Everything is a pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

MODALITY_KEYS = ("rgb", "nir", "tir")
SPLITS = ("train", "query", "gallery")

_SHAPES = ("ellipse", "box", "diamond", "ring")


@dataclass
class Sample:
    """One tri-modal observation: aligned images, identity, camera, mask."""

    images: dict[str, np.ndarray]  # each (3, H, W) float64 in [0, 1]
    identity: int
    camera: int
    fg_mask: np.ndarray            # (H, W) bool
    key: str
    erased: tuple[int, int, int, int] | None = None  # (y, x, h, w) of augment erasing


@dataclass
class ManifestRecord:
    path: str
    id: int
    camera: int
    split: str


@dataclass
class Manifest:
    records: list[ManifestRecord]

    def split(self, name: str) -> list[ManifestRecord]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}, expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]

    def identities(self, name: str) -> list[int]:
        return sorted({r.id for r in self.split(name)})

    def save(self, path: str | Path) -> None:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        records = []
        for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                records.append(ManifestRecord(obj["path"], int(obj["id"]),
                                              int(obj["camera"]), obj["split"]))
            except (json.JSONDecodeError, KeyError) as e:
                raise ParseError(f"bad manifest line {i + 1}: {e}") from e
        return cls(records)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _soft_blobs(rng: np.random.Generator, h: int, w: int, count: int) -> np.ndarray:
    """Sum of random anisotropic bumps, normalized to [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    canvas = np.zeros((h, w))
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = rng.uniform(0.10 * h, 0.35 * h)
        rx = rng.uniform(0.10 * w, 0.35 * w)
        amp = rng.uniform(0.4, 1.0)
        canvas += amp * np.exp(-(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2))
    peak = canvas.max()
    return canvas / peak if peak > 0 else canvas


def _background_scene(rng: np.random.Generator, h: int, w: int) -> dict:
    """One scene geometry per sample, shared by all modalities.

    Co-registered sensors look at the same clutter, so the blob field and
    ramp are drawn once; each modality renders them with its own response.
    """
    return {
        "field": _soft_blobs(rng, h, w, 5),
        "ramp": np.linspace(0, 1, h)[:, None] * np.ones((1, w)),
        "corner_a": rng.uniform(0.1, 0.9, size=3),
        "corner_b": rng.uniform(0.1, 0.9, size=3),
        "tint": rng.uniform(-0.55, 0.55, size=3),
    }


def _identity_params(seed: int, identity: int) -> dict:
    rng = np.random.default_rng([seed, 101, identity])
    return {
        "shape": _SHAPES[int(rng.integers(len(_SHAPES)))],
        "coverage": float(rng.uniform(0.16, 0.36)),
        "aspect": float(rng.uniform(0.7, 1.5)),
        "cx_frac": float(rng.uniform(0.38, 0.62)),
        "cy_frac": float(rng.uniform(0.35, 0.65)),
        "angle": float(rng.uniform(-0.35, 0.35)),
        "color_a": rng.uniform(0.25, 1.0, size=3),
        "color_b": rng.uniform(0.0, 0.9, size=3),
        "stripe_freq": float(rng.uniform(1.5, 4.5)),
        "stripe_dir": float(rng.uniform(0, np.pi)),
        "nir_gain": float(rng.uniform(0.55, 0.95)),
        "nir_gamma": float(rng.uniform(0.6, 1.6)),
        "heat": float(rng.uniform(0.78, 0.94)),
    }


def _glyph_mask(shape: str, h: int, w: int, cx: float, cy: float,
                rx: float, ry: float, angle: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Boolean mask plus the local (u, v) coordinates used for texture."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = (dx * np.cos(angle) + dy * np.sin(angle)) / rx
    v = (-dx * np.sin(angle) + dy * np.cos(angle)) / ry
    if shape == "ellipse":
        mask = u * u + v * v <= 1.0
    elif shape == "box":
        mask = np.maximum(np.abs(u), np.abs(v)) <= 1.0
    elif shape == "diamond":
        mask = np.abs(u) + np.abs(v) <= 1.0
    else:  # ring
        r = np.sqrt(u * u + v * v)
        mask = (r <= 1.0) & (r >= 0.45)
    return mask, u, v


_SHAPE_AREA = {"ellipse": np.pi, "box": 4.0, "diamond": 2.0, "ring": np.pi * (1 - 0.45 ** 2)}


def _render_foreground(params: dict, jitter_rng: np.random.Generator,
                       h: int, w: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Place the identity glyph with per-sample jitter; coverage stays in 10-60%."""
    cx = params["cx_frac"] * w + jitter_rng.uniform(-0.08, 0.08) * w
    cy = params["cy_frac"] * h + jitter_rng.uniform(-0.08, 0.08) * h
    scale = jitter_rng.uniform(0.9, 1.1)
    angle = params["angle"] + jitter_rng.uniform(-0.15, 0.15)
    unit_area = _SHAPE_AREA[params["shape"]]
    rxry = params["coverage"] * h * w / unit_area * scale * scale
    rx = np.sqrt(rxry / params["aspect"])
    ry = rxry / rx
    for _ in range(8):
        mask, u, v = _glyph_mask(params["shape"], h, w, cx, cy, rx, ry, angle)
        coverage = mask.mean()
        if 0.10 <= coverage <= 0.60:
            return mask, u, v
        factor = 1.15 if coverage < 0.10 else 0.87
        rx *= factor
        ry *= factor
    raise ContractError(f"could not place glyph within coverage bounds (got {coverage:.3f})")


def _camera_shift(seed: int, camera: int) -> tuple[np.ndarray, float]:
    rng = np.random.default_rng([seed, 404, camera])
    gain = rng.uniform(0.86, 1.14, size=3)
    offset = float(rng.uniform(-0.05, 0.05))
    return gain, offset


def render_sample(seed: int, identity: int, index: int, camera: int,
                  h: int = 64, w: int = 32) -> Sample:
    """Deterministically render one tri-modal sample."""
    params = _identity_params(seed, identity)
    jitter = np.random.default_rng([seed, 202, identity, index])
    fg, u, v = _render_foreground(params, jitter, h, w)

    stripes = np.sin(2 * np.pi * params["stripe_freq"]
                     * (u * np.cos(params["stripe_dir"]) + v * np.sin(params["stripe_dir"]))) > 0

    bg_rng = np.random.default_rng([seed, 303, identity, index])
    noise_rng = np.random.default_rng([seed, 505, identity, index])
    gain, offset = _camera_shift(seed, camera)
    scene = _background_scene(bg_rng, h, w)
    field, ramp = scene["field"], scene["ramp"]

    # RGB: striped two-color glyph over a colorful gradient-plus-blobs scene
    rgb = np.empty((3, h, w))
    for c in range(3):
        channel = scene["corner_a"][c] * (1 - ramp) + scene["corner_b"][c] * ramp
        channel = channel + scene["tint"][c] * field
        fg_channel = np.where(stripes, params["color_a"][c], params["color_b"][c])
        rgb[c] = np.where(fg, fg_channel, channel)

    # NIR: nonlinear grayscale response to the same scene geometry
    fg_lum = np.where(stripes,
                      params["color_a"].mean(), params["color_b"].mean())
    nir_fg = params["nir_gain"] * np.clip(fg_lum, 0.0, 1.0) ** params["nir_gamma"] + 0.15
    nir_bg = 0.2 + 0.45 * field ** 0.8
    nir_plane = np.where(fg, nir_fg, nir_bg)
    nir = np.repeat(nir_plane[None], 3, axis=0)

    # TIR: hot glyph over the same scene, rendered cool and faint
    tir_fg = params["heat"] + 0.06 * np.where(stripes, 1.0, -1.0)
    tir_bg = 0.12 + 0.18 * field
    tir_plane = np.where(fg, tir_fg, tir_bg)
    tir = np.repeat(tir_plane[None], 3, axis=0)

    images = {}
    for key, img in (("rgb", rgb), ("nir", nir), ("tir", tir)):
        img = img * gain[:, None, None] + offset
        img = img + noise_rng.normal(0.0, 0.02, size=img.shape)
        images[key] = np.clip(img, 0.0, 1.0)

    key = f"id{identity:03d}_s{index:03d}"
    return Sample(images=images, identity=identity, camera=camera, fg_mask=fg, key=key)


# ---------------------------------------------------------------------------
# Corpus generation and loading
# ---------------------------------------------------------------------------


def generate_dataset(seed: int, n_ids: int = 16, samples_per_id: int = 16,
                     n_cameras: int = 2, h: int = 64, w: int = 32,
                     out_dir: str | Path = "corpus") -> Manifest:
    """Render the corpus to disk and write the manifest.

    Identity split follows the usual retrieval protocol: the first half of
    the identities train, the second half form query/gallery (which overlap
    by construction). Regenerating with the same seed is byte-identical.
    """
    if n_ids < 4:
        raise ConfigError(f"need at least 4 identities, got {n_ids}")
    if samples_per_id < 4:
        raise ConfigError(f"need at least 4 samples per identity, got {samples_per_id}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e

    n_train_ids = n_ids // 2
    query_per_id = max(2, samples_per_id // 4)
    records = []
    for identity in range(n_ids):
        for index in range(samples_per_id):
            camera = index % n_cameras
            sample = render_sample(seed, identity, index, camera, h, w)
            base = f"images/{sample.key}"
            for mod in MODALITY_KEYS:
                img8 = np.clip(np.round(sample.images[mod] * 255.0), 0, 255).astype(np.uint8)
                write_ppm(out / f"{base}_{mod}.ppm", img8)
            write_pgm(out / f"masks/{sample.key}.pgm",
                      sample.fg_mask.astype(np.uint8) * 255)
            if identity < n_train_ids:
                split = "train"
            else:
                split = "query" if index < query_per_id else "gallery"
            records.append(ManifestRecord(base, identity, camera, split))
    manifest = Manifest(records)
    manifest.save(out / "manifest.jsonl")
    return manifest


def load_sample(root: str | Path, record: ManifestRecord) -> Sample:
    """Read one sample triple plus its mask back into float64 [0, 1]."""
    root = Path(root)
    key = Path(record.path).name
    images = {
        mod: read_ppm(root / f"{record.path}_{mod}.ppm").astype(np.float64) / 255.0
        for mod in MODALITY_KEYS
    }
    mask = read_pgm(root / f"masks/{key}.pgm") > 127
    return Sample(images=images, identity=record.id, camera=record.camera,
                  fg_mask=mask, key=key)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def hflip(sample: Sample) -> Sample:
    images = {k: v[:, :, ::-1].copy() for k, v in sample.images.items()}
    return Sample(images, sample.identity, sample.camera,
                  sample.fg_mask[:, ::-1].copy(), sample.key)


def augment(sample: Sample, seed: int) -> Sample:
    """Horizontal flip (p=.5), pad-4 random crop, random erasing (p=.5).

    The same geometric transform hits all three modalities and the mask;
    erased regions are filled with each modality's channel means and removed
    from the foreground mask. Train-split samples only.
    """
    rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), 777])
    out = sample
    if rng.random() < 0.5:
        out = hflip(out)

    h, w = out.fg_mask.shape
    pad = 4
    oy = int(rng.integers(0, 2 * pad + 1))
    ox = int(rng.integers(0, 2 * pad + 1))
    images = {}
    for k, v in out.images.items():
        padded = np.pad(v, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        images[k] = padded[:, oy:oy + h, ox:ox + w].copy()
    mask_p = np.pad(out.fg_mask, pad, mode="constant", constant_values=False)
    mask = mask_p[oy:oy + h, ox:ox + w].copy()

    erased = None
    if rng.random() < 0.5:
        area = rng.uniform(0.02, 0.20) * h * w
        aspect = rng.uniform(0.3, 3.3)
        eh = min(h, max(1, int(round(np.sqrt(area * aspect)))))
        ew = min(w, max(1, int(round(np.sqrt(area / aspect)))))
        ey = int(rng.integers(0, h - eh + 1))
        ex = int(rng.integers(0, w - ew + 1))
        for k in images:
            fill = images[k].mean(axis=(1, 2))
            images[k][:, ey:ey + eh, ex:ex + ew] = fill[:, None, None]
        mask[ey:ey + eh, ex:ex + ew] = False
        erased = (ey, ex, eh, ew)

    return Sample(images, out.identity, out.camera, mask, out.key, erased=erased)


# ---------------------------------------------------------------------------
# Identity-balanced batch sampling
# ---------------------------------------------------------------------------


def pk_sample_batch(manifest: Manifest, p_ids: int, k_instances: int,
                    seed, split: str = "train") -> list[ManifestRecord]:
    """P identities x K instances, deterministic in the seed.

    Identities are drawn without replacement; instances with replacement
    only when an identity has fewer than K samples.
    """
    rng = np.random.default_rng(seed)
    pool = manifest.split(split)
    by_id: dict[int, list[ManifestRecord]] = {}
    for r in pool:
        by_id.setdefault(r.id, []).append(r)
    ids = sorted(by_id)
    if len(ids) < p_ids:
        raise ContractError(
            f"split {split!r} has {len(ids)} identities, need {p_ids}"
        )
    chosen = rng.choice(ids, size=p_ids, replace=False)
    batch = []
    for identity in chosen:
        candidates = by_id[int(identity)]
        replace = len(candidates) < k_instances
        picks = rng.choice(len(candidates), size=k_instances, replace=replace)
        batch.extend(candidates[int(i)] for i in picks)
    return batch
