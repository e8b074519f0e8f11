"""Two-view stochastic augmentation with exactly replayable records.

The pipeline per view: square random resized crop -> resize to output_size
-> horizontal flip -> random grayscale -> color jitter -> gaussian blur.
All random draws happen up front in a fixed order, so a view is a pure
function of its AugmentRecord and the source image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imageops
from .errors import ConfigError
from .synthdata import SyntheticSample


@dataclass
class AugmentConfig:
    crop_min: float = 0.2
    crop_max: float = 1.0
    output_size: int = 64
    flip_prob: float = 0.5
    grayscale_prob: float = 0.2
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4
    blur_prob: float = 0.5
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("flip_prob", "grayscale_prob", "jitter_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if not 0.0 < self.crop_min <= self.crop_max <= 1.0:
            raise ConfigError(
                f"crop scale range must satisfy 0 < min <= max <= 1, "
                f"got ({self.crop_min}, {self.crop_max})"
            )
        if self.output_size < 8:
            raise ConfigError(f"output_size must be >= 8, got {self.output_size}")
        if self.jitter_strength < 0:
            raise ConfigError("jitter_strength must be >= 0")


@dataclass
class AugmentRecord:
    """Everything needed to replay one view bit for bit."""

    top: int
    left: int
    crop_size: int
    flip: bool
    grayscale: bool
    jitter: bool
    brightness: float
    contrast: float
    saturation: float
    hue_shift: float
    blur: bool
    blur_sigma: float


@dataclass
class ViewPair:
    view_a: np.ndarray
    view_b: np.ndarray
    record_a: AugmentRecord
    record_b: AugmentRecord


def draw_record(
    image_hw: tuple[int, int], config: AugmentConfig, rng: np.random.Generator
) -> AugmentRecord:
    """Sample one transform. Every parameter is drawn even when the
    corresponding op ends up disabled, keeping the draw order fixed."""
    h, w = image_hw
    side_limit = min(h, w)
    scale = rng.uniform(config.crop_min, config.crop_max)
    crop_size = int(round(np.sqrt(scale) * side_limit))
    crop_size = max(1, min(crop_size, side_limit))
    if crop_size < 2:
        raise ConfigError(
            f"crop of {crop_size}px from a {h}x{w} image is too small; "
            f"raise crop_min or use larger images"
        )
    top = int(rng.integers(0, h - crop_size + 1))
    left = int(rng.integers(0, w - crop_size + 1))

    flip = bool(rng.random() < config.flip_prob)
    grayscale = bool(rng.random() < config.grayscale_prob)
    jitter = bool(rng.random() < config.jitter_prob)
    s = config.jitter_strength
    brightness = float(rng.uniform(1.0 - s, 1.0 + s))
    contrast = float(rng.uniform(1.0 - s, 1.0 + s))
    saturation = float(rng.uniform(1.0 - s, 1.0 + s))
    hue_shift = float(rng.uniform(-s / 2.0, s / 2.0))
    blur = bool(rng.random() < config.blur_prob)
    blur_sigma = float(rng.uniform(config.blur_sigma_min, config.blur_sigma_max))
    return AugmentRecord(
        top=top,
        left=left,
        crop_size=crop_size,
        flip=flip,
        grayscale=grayscale,
        jitter=jitter,
        brightness=brightness,
        contrast=contrast,
        saturation=saturation,
        hue_shift=hue_shift,
        blur=blur,
        blur_sigma=blur_sigma,
    )


def apply_record(
    image: np.ndarray, record: AugmentRecord, output_size: int
) -> np.ndarray:
    h, w = image.shape[:2]
    if record.crop_size > min(h, w):
        raise ConfigError(
            f"crop size {record.crop_size} exceeds image size {h}x{w}"
        )
    view = image[
        record.top : record.top + record.crop_size,
        record.left : record.left + record.crop_size,
    ]
    view = imageops.bilinear_resize(view, output_size, output_size)
    if record.flip:
        view = imageops.hflip(view)
    if record.grayscale:
        view = imageops.to_grayscale(view)
    if record.jitter:
        view = imageops.adjust_brightness(view, record.brightness)
        view = imageops.adjust_contrast(view, record.contrast)
        view = imageops.adjust_saturation(view, record.saturation)
        view = imageops.shift_hue(view, record.hue_shift)
    if record.blur:
        view = imageops.gaussian_blur(view, record.blur_sigma)
    return view.astype(np.float32)


def mask_for_record(
    mask: np.ndarray, record: AugmentRecord, output_size: int
) -> np.ndarray:
    """Warp a class mask through the geometric part of a record.

    Photometric ops never touch the mask.
    """
    cropped = mask[
        record.top : record.top + record.crop_size,
        record.left : record.left + record.crop_size,
    ]
    warped = imageops.nearest_resize(cropped, output_size, output_size)
    if record.flip:
        warped = imageops.hflip(warped)
    return warped


def two_views(
    sample: SyntheticSample, config: AugmentConfig, rng: np.random.Generator
) -> ViewPair:
    """Two independent draws of the transform set applied to one image."""
    hw = sample.image.shape[:2]
    record_a = draw_record(hw, config, rng)
    record_b = draw_record(hw, config, rng)
    return ViewPair(
        view_a=apply_record(sample.image, record_a, config.output_size),
        view_b=apply_record(sample.image, record_b, config.output_size),
        record_a=record_a,
        record_b=record_b,
    )


def rng_for_sample(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    """Per-sample augmentation stream, a pure function of its coordinates."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, sample_id]))
