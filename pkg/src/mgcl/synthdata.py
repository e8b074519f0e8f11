"""Synthetic shapes dataset with per-pixel class masks.

Each image holds 1-3 colored geometric shapes on a textured background.
Class id 0 is background; shape classes are 1..num_classes, each with a
distinct base hue plus noise so segmentation ground truth is learnable but
not trivially saturated. Generation is a pure function of (rng_seed,
sample_id), so workers can render disjoint id ranges independently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .imageops import bilinear_resize, hsv_to_rgb

DATASET_MANIFEST_VERSION = 1

# shape primitives cycle by class id; every primitive rasterizes to one
# connected region
SHAPE_NAMES = ("disk", "square", "triangle", "diamond", "ring", "cross")


@dataclass
class SyntheticSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) int64, 0 = background
    sample_id: int


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        half = 0.82 * r
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if kind == "triangle":
        # upward triangle: apex at (cy - r), base at (cy + 0.8 r)
        inside = (dy >= -r) & (dy <= 0.8 * r)
        width = 0.95 * (dy + r) / 1.8
        return inside & (np.abs(dx) <= width)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.45 * r) ** 2)
    if kind == "cross":
        arm = 0.38 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    raise ValueError(f"unknown shape kind: {kind}")


def _textured_background(size: int, rng: np.random.Generator) -> np.ndarray:
    # low-res noise field upsampled smoothly, muted color
    coarse = rng.uniform(0.0, 1.0, size=(6, 6, 3)).astype(np.float32)
    field = bilinear_resize(coarse, size, size)
    base = rng.uniform(0.25, 0.60)
    tint = rng.uniform(-0.10, 0.10, size=3).astype(np.float32)
    img = base + tint[None, None, :] + 0.16 * (field - 0.5)
    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_sample(
    sample_id: int, num_classes: int, image_size: int, rng_seed: int
) -> SyntheticSample:
    """Render one sample deterministically from (rng_seed, sample_id)."""
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, sample_id]))
    img = _textured_background(image_size, rng)
    mask = np.zeros((image_size, image_size), dtype=np.int64)

    n_shapes = int(rng.integers(1, 4))
    placed: list[tuple[float, float, float]] = []
    for _ in range(n_shapes):
        cls = int(rng.integers(1, num_classes + 1))
        kind = SHAPE_NAMES[(cls - 1) % len(SHAPE_NAMES)]
        ok = False
        for _attempt in range(40):
            r = rng.uniform(0.14, 0.24) * image_size
            cy = rng.uniform(r + 1, image_size - r - 1)
            cx = rng.uniform(r + 1, image_size - r - 1)
            # keep shapes disjoint so each object stays one connected region
            if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 2.0) ** 2 for py, px, pr in placed):
                ok = True
                break
        if not ok:
            continue
        placed.append((cy, cx, r))
        region = _shape_mask(kind, image_size, cy, cx, r)

        # per-class base hue with substantial noise: classes overlap in color
        # space, so color alone does not saturate the segmentation probes
        hue = (cls - 1) / num_classes + rng.normal(0.0, 0.055)
        sat = rng.uniform(0.45, 0.95)
        val = rng.uniform(0.45, 0.95)
        color = hsv_to_rgb(np.array([hue % 1.0, sat, val], dtype=np.float32))
        pix = color[None, :] + rng.normal(0.0, 0.05, size=(int(region.sum()), 3))
        img[region] = np.clip(pix, 0.0, 1.0).astype(np.float32)
        mask[region] = cls

    return SyntheticSample(image=img, mask=mask, sample_id=sample_id)


def generate_dataset(
    n_samples: int, num_classes: int, image_size: int, rng_seed: int
) -> list[SyntheticSample]:
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    if num_classes < 2:
        raise ConfigError(f"num_classes must be >= 2, got {num_classes}")
    if image_size < 32:
        raise ConfigError(f"image_size must be >= 32, got {image_size}")
    return [
        render_sample(i, num_classes, image_size, rng_seed) for i in range(n_samples)
    ]


def dominant_class(sample: SyntheticSample) -> int:
    """Most frequent non-background class, lowest id on ties.

    Used as the image-level label for the linear probe.
    """
    counts = np.bincount(sample.mask.ravel())
    counts[0] = 0
    if counts.sum() == 0:
        raise ValueError(f"sample {sample.sample_id} contains no shapes")
    return int(counts.argmax())


def save_dataset(samples: list[SyntheticSample], out_dir: str | Path) -> Path:
    """Persist as PNG pairs plus a manifest. Images are quantized to 8 bits;
    regeneration from the seed is the canonical path for exact data."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        img_name = f"sample_{s.sample_id:06d}.png"
        mask_name = f"sample_{s.sample_id:06d}_mask.png"
        Image.fromarray((s.image * 255.0 + 0.5).astype(np.uint8)).save(out / img_name)
        Image.fromarray(s.mask.astype(np.uint8)).save(out / mask_name)
        entries.append({"sample_id": s.sample_id, "image": img_name, "mask": mask_name})
    manifest = {"format_version": DATASET_MANIFEST_VERSION, "samples": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"


def load_dataset(manifest_path: str | Path) -> list[SyntheticSample]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != DATASET_MANIFEST_VERSION:
        raise ConfigError(
            f"unsupported dataset manifest version {manifest.get('format_version')}"
        )
    root = manifest_path.parent
    samples = []
    for entry in manifest["samples"]:
        img = np.asarray(Image.open(root / entry["image"]), dtype=np.float32) / 255.0
        mask = np.asarray(Image.open(root / entry["mask"])).astype(np.int64)
        samples.append(
            SyntheticSample(image=img, mask=mask, sample_id=int(entry["sample_id"]))
        )
    return samples
