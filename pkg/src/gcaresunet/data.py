"""Synthetic segmentation data, resizing, augmentation and dataset folders.

Images are float32 arrays of shape (H, W) for gray or (H, W, 3) for RGB on
the 0..255 scale; masks are (H, W) int64 class ids.  All randomness comes
from ``numpy.random.Generator`` objects built on the counter-based Philox
bit generator, one independent stream per (seed, index) pair.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .config import AugmentConfig, SynthConfig
from .netpbm import load_image, save_image


@dataclass
class SegSample:
    image: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)


def stream(*keys: int) -> np.random.Generator:
    """Independent Philox stream for a tuple of non-negative integer keys."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(keys))))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def ellipse_mask(shape, center, axes) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    cy, cx = center
    a, b = axes
    return ((yy + 0.5 - cy) / a) ** 2 + ((xx + 0.5 - cx) / b) ** 2 <= 1.0


def rect_mask(shape, center, half) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return (np.abs(yy + 0.5 - center[0]) <= half[0]) & (np.abs(xx + 0.5 - center[1]) <= half[1])


def class_intensity(k: int, num_classes: int) -> float:
    return 40.0 + 190.0 * k / (num_classes - 1)


_CLASS_HUES = (0.0, 0.33, 0.66, 0.16, 0.5, 0.83)


def synth_sample(cfg: SynthConfig, index: int) -> SegSample:
    rng = stream(cfg.seed, index)
    n, k_total = cfg.image_size, cfg.num_classes
    mask = np.zeros((n, n), dtype=np.int64)
    level = np.full((n, n), class_intensity(0, k_total) + rng.uniform(-10, 10))
    for k in range(1, k_total):
        if rng.random() >= cfg.presence:
            continue
        for _ in range(50):
            a, b = rng.uniform(n / 10, n / 4, size=2)
            cy, cx = rng.uniform(a, n - a), rng.uniform(b, n - b)
            shape = ellipse_mask(mask.shape, (cy, cx), (a, b)) if k % 2 else \
                rect_mask(mask.shape, (cy, cx), (a * 0.8, b * 0.8))
            if shape.any() and not (shape & (mask > 0)).any():
                mask[shape] = k
                level[shape] = class_intensity(k, k_total) + rng.uniform(-12, 12)
                break
    gray = np.clip(level + rng.normal(0.0, cfg.noise_sigma, size=level.shape), 0, 255)
    if cfg.modality == "gray":
        image = np.round(gray).astype(np.float32)
    else:
        hue = np.array([_CLASS_HUES[k % len(_CLASS_HUES)] for k in range(k_total)])[mask]
        hsv = np.stack([hue, np.full_like(gray, 0.6), gray / 255.0], axis=-1)
        image = np.round(hsv_to_rgb(hsv) * 255.0).astype(np.float32)
    return SegSample(image, mask, {"index": index})


def synth_generate(cfg: SynthConfig) -> list:
    if cfg.num_classes < 2 or cfg.image_size < 16:
        raise ValueError("synthetic data needs num_classes >= 2 and image_size >= 16")
    return [synth_sample(cfg, i) for i in range(cfg.count)]


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------


def _linear_taps(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, (src - i0)


def resize_bilinear(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of (H, W) or (H, W, C)."""
    img = np.asarray(image, dtype=np.float64)
    y0, y1, fy = _linear_taps(img.shape[0], h)
    x0, x1, fx = _linear_taps(img.shape[1], w)
    extra = (None,) * (img.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    rows = img[y0] * (1 - fy) + img[y1] * fy
    out = rows[:, x0] * (1 - fx) + rows[:, x1] * fx
    return out.astype(np.float32)


def resize_nearest(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    ys = np.minimum(((np.arange(h) + 0.5) * mask.shape[0] / h).astype(np.int64), mask.shape[0] - 1)
    xs = np.minimum(((np.arange(w) + 0.5) * mask.shape[1] / w).astype(np.int64), mask.shape[1] - 1)
    return mask[ys[:, None], xs[None, :]]


def _place(arr, canvas_hw, top, left, fill):
    """Paste ``arr`` at (top, left) on a filled canvas, cropping what falls outside."""
    h, w = canvas_hw
    out = np.full((h, w) + arr.shape[2:], fill, dtype=arr.dtype)
    sy0, sx0 = max(0, -top), max(0, -left)
    dy0, dx0 = max(0, top), max(0, left)
    ny = min(arr.shape[0] - sy0, h - dy0)
    nx = min(arr.shape[1] - sx0, w - dx0)
    if ny > 0 and nx > 0:
        out[dy0 : dy0 + ny, dx0 : dx0 + nx] = arr[sy0 : sy0 + ny, sx0 : sx0 + nx]
    return out


def resize_with_pad(image: np.ndarray, mask: np.ndarray | None, target: int,
                    image_pad: float = 128, mask_pad: int = 0) -> SegSample:
    """Scale the longer side to ``target`` and pad the shorter one symmetrically."""
    if target % 32:
        raise ValueError(f"target size {target} must be divisible by 32")
    h, w = image.shape[:2]
    s = target / max(h, w)
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    top, left = (target - nh) // 2, (target - nw) // 2
    img = _place(resize_bilinear(image, nh, nw), (target, target), top, left, np.float32(image_pad))
    msk = None
    if mask is not None:
        msk = _place(resize_nearest(mask, nh, nw), (target, target), top, left, mask_pad)
    meta = {"orig_size": [h, w], "pad": [top, left], "content": [nh, nw]}
    return SegSample(img, msk, meta)


def crop_back(mask: np.ndarray, meta: dict) -> np.ndarray:
    """Undo :func:`resize_with_pad` on a predicted mask."""
    top, left = meta["pad"]
    nh, nw = meta["content"]
    h, w = meta["orig_size"]
    return resize_nearest(mask[top : top + nh, left : left + nw], h, w)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def geometric_transform(s: SegSample, scale_y: float, scale_x: float, flip: bool,
                        top: int, left: int, cfg: AugmentConfig, target=None) -> SegSample:
    """Resize by (scale_y, scale_x), optionally mirror, then place on a canvas."""
    h, w = s.mask.shape
    target = target or (h, w)
    nh, nw = max(1, int(round(h * scale_y))), max(1, int(round(w * scale_x)))
    img = s.image if (nh, nw) == (h, w) else resize_bilinear(s.image, nh, nw)
    msk = s.mask if (nh, nw) == (h, w) else resize_nearest(s.mask, nh, nw)
    if flip:
        img, msk = img[:, ::-1], msk[:, ::-1]
    img = _place(np.asarray(img, dtype=np.float32), target, top, left, np.float32(cfg.image_pad))
    msk = _place(np.asarray(msk), target, top, left, cfg.mask_pad)
    return SegSample(img, msk, dict(s.meta))


def augment_geometric(s: SegSample, rng: np.random.Generator, cfg: AugmentConfig,
                      target=None) -> SegSample:
    """Random scale with per-axis aspect jitter, horizontal flip, and translation.

    Order: scale/jitter -> flip -> placement on the target canvas.  When the
    scaled image is smaller than the canvas it lands at a random offset in
    the padded canvas; when larger, a random window of it is kept.
    """
    h, w = s.mask.shape
    th, tw = target or (h, w)
    base = rng.uniform(cfg.scale[0], cfg.scale[1])
    jy, jx = rng.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=2)
    sy, sx = base * jy, base * jx
    nh, nw = max(1, int(round(h * sy))), max(1, int(round(w * sx)))
    flip = bool(rng.random() < cfg.hflip_p)
    top = int(rng.integers(0, th - nh + 1)) if nh <= th else -int(rng.integers(0, nh - th + 1))
    left = int(rng.integers(0, tw - nw + 1)) if nw <= tw else -int(rng.integers(0, nw - tw + 1))
    return geometric_transform(s, sy, sx, flip, top, left, cfg, (th, tw))


def hsv_shift(image_rgb: np.ndarray, dh: float, ks: float, kv: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(np.asarray(image_rgb, dtype=np.float64) / 255.0, 0, 1))
    hsv[..., 0] = (hsv[..., 0] + dh) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * ks, 0, 1)
    hsv[..., 2] = np.clip(hsv[..., 2] * kv, 0, 1)
    return (hsv_to_rgb(hsv) * 255.0).astype(np.float32)


def augment_hsv(image_rgb: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Hue shift in [-hue, hue] (wrapping) and sat/val gains in [1-x, 1+x]."""
    if cfg.modality != "rgb":
        raise ValueError("HSV perturbation applies to the rgb modality only")
    dh = rng.uniform(-cfg.hue, cfg.hue)
    ks = rng.uniform(1 - cfg.sat, 1 + cfg.sat)
    kv = rng.uniform(1 - cfg.val, 1 + cfg.val)
    return hsv_shift(image_rgb, dh, ks, kv)


def augment(s: SegSample, rng: np.random.Generator, cfg: AugmentConfig) -> SegSample:
    out = augment_geometric(s, rng, cfg)
    if cfg.modality == "rgb" and out.image.ndim == 3:
        out.image = augment_hsv(out.image, rng, cfg)
    return out


# ---------------------------------------------------------------------------
# batching and dataset folders
# ---------------------------------------------------------------------------


def to_input(images) -> np.ndarray:
    """Stack images into a (B, 3, H, W) float32 batch scaled to [0, 1]."""
    out = []
    for img in images:
        img = np.asarray(img, dtype=np.float32)
        if img.ndim == 2:
            img = np.repeat(img[None], 3, axis=0)
        else:
            img = img.transpose(2, 0, 1)
        out.append(img / np.float32(255.0))
    return np.stack(out).astype(np.float32)


def split_counts(n: int, fractions=(0.7, 0.15, 0.15)) -> tuple:
    """floor / floor / remainder."""
    train = math.floor(n * fractions[0] + 1e-9)
    val = math.floor(n * fractions[1] + 1e-9)
    return train, val, n - train - val


def make_split(n: int, fractions=(0.7, 0.15, 0.15)) -> dict:
    tr, va, _ = split_counts(n, fractions)
    ids = list(range(n))
    return {"train": ids[:tr], "val": ids[tr : tr + va], "test": ids[tr + va :]}


def write_dataset(root, samples: list, split: dict) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        ext = "pgm" if s.image.ndim == 2 else "ppm"
        save_image(root / "images" / f"{i:04d}.{ext}", np.round(s.image).astype(np.uint8))
        save_image(root / "masks" / f"{i:04d}.pgm", s.mask.astype(np.uint8))
    (root / "split.json").write_text(json.dumps(split, indent=1) + "\n")


def read_dataset(root) -> tuple:
    """Load ``images/``, ``masks/`` and ``split.json``; returns (samples by id, split)."""
    root = Path(root)
    split = json.loads((root / "split.json").read_text())
    samples = {}
    for ids in split.values():
        for i in ids:
            img_path = root / "images" / f"{i:04d}.pgm"
            if not img_path.exists():
                img_path = root / "images" / f"{i:04d}.ppm"
            image = load_image(img_path).astype(np.float32)
            mask = load_image(root / "masks" / f"{i:04d}.pgm").astype(np.int64)
            samples[i] = SegSample(image, mask, {"index": i})
    return samples, split
