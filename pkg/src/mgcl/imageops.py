"""Low-level image kernels used by the renderer and the augmentation pipeline.

Everything here is pure numpy, float32 in, float32 out, and deterministic.
Images are (H, W, 3) arrays in [0, 1]; masks are (H, W) integer arrays.
"""

from __future__ import annotations

import math

import numpy as np

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV, all channels in [0, 1]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)

    # hue sectors; undefined (delta == 0) pixels get hue 0
    safe = np.maximum(delta, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = (h / 6.0) % 1.0
    h = np.where(delta == 0, 0.0, h)
    return np.stack([h, s, v], axis=-1).astype(np.float32)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB, all channels in [0, 1]."""
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))

    choices = [
        (v, t, p),
        (q, v, p),
        (p, v, t),
        (p, q, v),
        (t, p, v),
        (v, p, q),
    ]
    r = np.select([i == k for k in range(6)], [c[0] for c in choices])
    g = np.select([i == k for k in range(6)], [c[1] for c in choices])
    b = np.select([i == k for k in range(6)], [c[2] for c in choices])
    return np.stack([r, g, b], axis=-1).astype(np.float32)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (H, W[, C]) with bilinear sampling, half-pixel centers.

    Resizing to the input size is an exact copy.
    """
    h, w = img.shape[:2]
    if (out_h, out_w) == (h, w):
        return img.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)[:, None]
    wx = (xs - x0).astype(np.float32)[None, :]
    if img.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    top = a * (1.0 - wx) + b * wx
    bot = c * (1.0 - wx) + d * wx
    return (top * (1.0 - wy) + bot * wy).astype(np.float32)


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize, used for masks (never interpolates labels)."""
    h, w = img.shape[:2]
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return img[ys][:, xs]


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def to_grayscale(img: np.ndarray) -> np.ndarray:
    luma = img @ LUMA_WEIGHTS
    return np.repeat(luma[..., None], 3, axis=-1).astype(np.float32)


def adjust_brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(img * factor, 0.0, 1.0).astype(np.float32)


def adjust_contrast(img: np.ndarray, factor: float) -> np.ndarray:
    mean = float((img @ LUMA_WEIGHTS).mean())
    return np.clip(mean + (img - mean) * factor, 0.0, 1.0).astype(np.float32)


def adjust_saturation(img: np.ndarray, factor: float) -> np.ndarray:
    gray = (img @ LUMA_WEIGHTS)[..., None]
    return np.clip(gray + (img - gray) * factor, 0.0, 1.0).astype(np.float32)


def shift_hue(img: np.ndarray, shift: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0).astype(np.float32)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with kernel radius ceil(3 * sigma), reflect padding."""
    if sigma <= 0:
        return img.copy()
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel = (kernel / kernel.sum()).astype(np.float32)

    def conv_rows(a: np.ndarray) -> np.ndarray:
        padded = np.pad(a, [(radius, radius)] + [(0, 0)] * (a.ndim - 1), mode="reflect")
        out = np.zeros_like(a, dtype=np.float32)
        for t, kv in enumerate(kernel):
            out += kv * padded[t : t + a.shape[0]]
        return out

    out = conv_rows(img.astype(np.float32))
    out = np.swapaxes(conv_rows(np.swapaxes(out, 0, 1)), 0, 1)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
