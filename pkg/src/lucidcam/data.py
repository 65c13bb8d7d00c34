"""Synthetic H&E-like patches with lesion masks, augmentation, filtering, splitting and disk I/O.

Positives carry 3-8 dark purple irregular ellipses with at least one centre
inside the central S/3 window; negatives are stain texture only. Bright and
dark outliers are near-uniform images labelled negative.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, replace

import numpy as np

from .errors import ArgumentError, DataError
from .persist import atomic_write_bytes
from .render import read_png, write_png_array
from .rng import SplitMix64, derive_seed
from .tensor import bilinear_resize

PINK = np.array([0.92, 0.62, 0.78])
PINK_DEEP = np.array([0.80, 0.42, 0.64])
PURPLE = np.array([0.28, 0.10, 0.40])
LILAC = np.array([0.70, 0.50, 0.78])


@dataclass
class Sample:
    image: np.ndarray
    label: int
    mask: np.ndarray | None = None
    id: str = ""
    kind: str = ""


@dataclass
class DataGenConfig:
    n_samples: int
    size: int = 96
    pos_frac: float = 0.4
    bright_outlier_frac: float = 0.01
    dark_outlier_frac: float = 0.01
    seed: int = 42

    def validate(self):
        fracs = (self.pos_frac, self.bright_outlier_frac, self.dark_outlier_frac)
        if self.n_samples < 1 or self.size < 3:
            raise ArgumentError(f"need n_samples >= 1 and size >= 3, got {self.n_samples}, {self.size}")
        if any(f < 0 for f in fracs) or sum(fracs) > 1:
            raise ArgumentError(f"fractions must be >= 0 and sum to <= 1, got {fracs}")


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def class_plan(config: DataGenConfig) -> list[str]:
    """Kind of every sample index: 'positive', 'negative', 'bright' or 'dark'."""
    n = config.n_samples
    n_pos = _round(n * config.pos_frac)
    n_bright = _round(n * config.bright_outlier_frac)
    n_dark = _round(n * config.dark_outlier_frac)
    if n_pos + n_bright + n_dark > n:
        raise ArgumentError("rounded class counts exceed n_samples")
    kinds = ["positive"] * n_pos + ["bright"] * n_bright + ["dark"] * n_dark
    kinds += ["negative"] * (n - len(kinds))
    return SplitMix64(derive_seed(config.seed, 0xC1A55)).shuffle(kinds)


def _value_noise(rng: SplitMix64, size: int, cells: int) -> np.ndarray:
    grid = rng.uniform_array(0.0, 1.0, (cells + 1, cells + 1)).astype(np.float32)
    return bilinear_resize(grid, size, size).astype(np.float64)


def _texture(rng: SplitMix64, size: int) -> np.ndarray:
    tex = 0.6 * _value_noise(rng, size, max(2, size // 12)) + 0.4 * _value_noise(rng, size, max(2, size // 4))
    img = PINK[:, None, None] * (1 - tex) + PINK_DEEP[:, None, None] * tex
    img = img + rng.uniform_array(-0.03, 0.03, (3, size, size))
    # faint stromal specks in every class
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.randint(6, 14)):
        cy, cx, r = rng.uniform(0, size), rng.uniform(0, size), rng.uniform(1.0, 2.2)
        spot = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, spot] = 0.6 * img[:, spot] + 0.4 * LILAC[:, None]
    return img


def _ellipse(rng: SplitMix64, size: int, cy: float, cx: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    a, b = rng.uniform(4.0, 9.0), rng.uniform(4.0, 9.0)
    theta = rng.uniform(0.0, math.pi)
    p1, p2 = rng.uniform(0.0, 2 * math.pi), rng.uniform(0.0, 2 * math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    phi = np.arctan2(v, u)
    edge = 1.0 + 0.15 * np.sin(3 * phi + p1) + 0.08 * np.sin(5 * phi + p2)
    return (u / a) ** 2 + (v / b) ** 2 < edge ** 2


def make_sample(config: DataGenConfig, index: int, kind: str, prefix: str = "") -> Sample:
    """Sample ``index``; depends only on (config.seed, index, kind)."""
    s = config.size
    rng = SplitMix64(derive_seed(config.seed, index))
    mask = np.zeros((s, s), dtype=np.float32)
    sid = f"{prefix}{index:05d}"
    if kind == "bright":
        img = rng.uniform_array(0.97, 1.0, (3, s, s))
        return Sample(img.astype(np.float32), 0, mask, sid, kind)
    if kind == "dark":
        img = rng.uniform_array(0.0, 0.03, (3, s, s))
        return Sample(img.astype(np.float32), 0, mask, sid, kind)
    img = _texture(rng, s)
    label = 0
    if kind == "positive":
        label = 1
        lo, hi = s / 3.0, 2.0 * s / 3.0
        n = rng.randint(3, 8)
        for j in range(n):
            if j == 0:
                cy, cx = rng.uniform(lo, hi), rng.uniform(lo, hi)
            else:
                cy, cx = rng.uniform(0, s), rng.uniform(0, s)
            blob = _ellipse(rng, s, cy, cx)
            shade = rng.uniform(0.8, 1.0)
            img[:, blob] = 0.15 * img[:, blob] + 0.85 * shade * PURPLE[:, None]
            mask[blob] = 1.0
        if not mask[int(lo):int(math.ceil(hi)), int(lo):int(math.ceil(hi))].any():
            # irregular edge shrank the central blob to nothing; plant its centre pixel
            cy, cx = int(s // 2), int(s // 2)
            img[:, cy, cx] = PURPLE
            mask[cy, cx] = 1.0
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, label, mask, sid, kind)


def generate_dataset(config: DataGenConfig, prefix: str = "", workers: int = 1) -> list[Sample]:
    config.validate()
    kinds = class_plan(config)
    args = list(enumerate(kinds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda a: make_sample(config, a[0], a[1], prefix), args))
    return [make_sample(config, i, k, prefix) for i, k in args]


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32, copy=False)


def channel_stats(samples) -> tuple[list, list]:
    """Per-channel mean and standard deviation over a dataset, float64 accumulation."""
    if not samples:
        raise DataError("channel_stats needs a non-empty dataset")
    c = samples[0].image.shape[0]
    total = np.zeros(c)
    sq = np.zeros(c)
    n = 0
    for s in samples:
        x = s.image.reshape(c, -1).astype(np.float64)
        total += x.sum(axis=1)
        sq += (x * x).sum(axis=1)
        n += x.shape[1]
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 1e-12))
    return [float(v) for v in mean], [float(v) for v in std]


# -- augmentation ---------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    rotate: float = 0.5
    crop: float = 0.5
    flip_h: float = 0.5
    flip_v: float = 0.5
    lighting: float = 0.5
    blur: float = 0.25
    pad: int = 8
    brightness: tuple = (0.8, 1.2)
    max_sigma: float = 1.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def rotate90(a: np.ndarray, k: int) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(a, k, axes=(-2, -1)))


def flip_h(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[..., ::-1])


def flip_v(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a[..., ::-1, :])


def reflect_crop(a: np.ndarray, pad: int, oy: int, ox: int) -> np.ndarray:
    h, w = a.shape[-2:]
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(a, widths, mode="reflect")
    return np.ascontiguousarray(padded[..., oy:oy + h, ox:ox + w])


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur over the last two axes with reflect borders."""
    if sigma <= 0:
        return img
    r = max(1, int(math.ceil(3 * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    h, w = img.shape[-2:]
    r = min(r, h - 1, w - 1)
    k = k[len(k) // 2 - r: len(k) // 2 + r + 1]
    k /= k.sum()
    src = img.astype(np.float64)
    p = np.pad(src, [(0, 0)] * (img.ndim - 2) + [(r, r), (0, 0)], mode="reflect")
    out = sum(k[i] * p[..., i:i + h, :] for i in range(2 * r + 1))
    p = np.pad(out, [(0, 0)] * (img.ndim - 2) + [(0, 0), (r, r)], mode="reflect")
    out = sum(k[i] * p[..., :, i:i + w] for i in range(2 * r + 1))
    return out.astype(img.dtype)


def augment(sample: Sample, rng: SplitMix64, config: AugmentConfig = AugmentConfig()) -> Sample:
    """Random geometric (image + mask) and photometric (image only) transforms."""
    img, mask = sample.image, sample.mask
    geo = []
    if rng.coin(config.rotate):
        k = rng.randint(0, 3)
        geo.append(lambda a, k=k: rotate90(a, k))
    if rng.coin(config.crop):
        span = 2 * config.pad
        oy, ox = rng.randint(0, span), rng.randint(0, span)
        geo.append(lambda a, oy=oy, ox=ox: reflect_crop(a, config.pad, oy, ox))
    if rng.coin(config.flip_h):
        geo.append(flip_h)
    if rng.coin(config.flip_v):
        geo.append(flip_v)
    for fn in geo:
        img = fn(img)
        mask = fn(mask) if mask is not None else None
    if rng.coin(config.lighting):
        f = rng.uniform(*config.brightness)
        img = np.clip(img * f, 0.0, 1.0).astype(np.float32)
    if rng.coin(config.blur):
        img = gaussian_blur(img, rng.uniform(0.0, config.max_sigma))
    return replace(sample, image=img, mask=mask)


# -- curation ---------------------------------------------------------------

def filter_outliers(dataset, low: float = 0.05, high: float = 0.95):
    """Split off samples whose mean intensity is < low or > high.

    Returns ``(kept, removed)`` where removed is a list of (id, mean).
    """
    if not 0 <= low < high <= 1:
        raise ArgumentError(f"need 0 <= low < high <= 1, got {low}, {high}")
    kept, removed = [], []
    for s in dataset:
        m = float(np.mean(s.image, dtype=np.float64))
        if m < low or m > high:
            removed.append((s.id, m))
        else:
            kept.append(s)
    return kept, removed


def stratified_split(dataset, valid_frac: float, seed: int):
    """Per-class shuffled split preserving the positive ratio in both halves."""
    if not 0 < valid_frac < 1:
        raise ArgumentError(f"valid_frac must be in (0, 1), got {valid_frac}")
    by_class = {0: [], 1: []}
    for i, s in enumerate(dataset):
        by_class.setdefault(s.label, []).append(i)
    if not by_class[0] or not by_class[1]:
        raise DataError("stratified_split needs both classes present")
    rng = SplitMix64(derive_seed(seed, 0x5B11))
    train_idx, valid_idx = [], []
    for label in sorted(by_class):
        idx = rng.shuffle(list(by_class[label]))
        n_valid = _round(len(idx) * valid_frac)
        valid_idx += idx[:n_valid]
        train_idx += idx[n_valid:]
    return [dataset[i] for i in sorted(train_idx)], [dataset[i] for i in sorted(valid_idx)]


# -- disk layout ------------------------------------------------------------

def save_dataset(dataset, out_dir: str, manifest: dict | None = None):
    """Write images/<id>.png, masks/<id>.png, labels.csv and optionally manifest.json."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    if any(s.mask is not None for s in dataset):
        os.makedirs(mask_dir, exist_ok=True)
    rows = []
    for s in dataset:
        name = f"{s.id}.png"
        pixels = np.floor(np.clip(s.image, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
        write_png_array(pixels, os.path.join(img_dir, name))
        if s.mask is not None:
            write_png_array(np.where(s.mask > 0.5, 255, 0).astype(np.uint8), os.path.join(mask_dir, name))
        rows.append((name, s.label))
    text = "filename,label\n" + "".join(f"{n},{l}\n" for n, l in rows)
    atomic_write_bytes(os.path.join(out_dir, "labels.csv"), text.encode())
    if manifest is not None:
        atomic_write_bytes(os.path.join(out_dir, "manifest.json"),
                           (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def load_image_dir(images_path: str, labels_csv_path: str, masks_path: str | None = None) -> list[Sample]:
    """Read a PNG directory described by a ``filename,label`` CSV; values scaled v/255."""
    try:
        with open(labels_csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DataError(f"cannot read labels file {labels_csv_path}: {e}") from e
    if not rows or [c.strip() for c in rows[0]] != ["filename", "label"]:
        raise DataError(f"{labels_csv_path}: header must be 'filename,label'")
    out = []
    size = None
    for row in rows[1:]:
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{labels_csv_path}: malformed row {row}")
        name, raw_label = row[0].strip(), row[1].strip()
        if raw_label not in ("0", "1"):
            raise DataError(f"{name}: label must be 0 or 1, got {raw_label!r}")
        path = os.path.join(images_path, name)
        if not os.path.isfile(path):
            raise DataError(f"missing image file {name}")
        pixels = read_png(path, mode="RGB")
        if size is None:
            size = pixels.shape
        elif pixels.shape != size:
            raise DataError(f"{name}: size {pixels.shape[:2]} differs from {size[:2]}")
        image = (pixels.astype(np.float32) / np.float32(255.0)).transpose(2, 0, 1)
        mask = None
        if masks_path is not None:
            mpath = os.path.join(masks_path, name)
            if os.path.isfile(mpath):
                m = read_png(mpath, mode="L")
                if m.shape != pixels.shape[:2]:
                    raise DataError(f"{name}: mask size {m.shape} differs from image {pixels.shape[:2]}")
                mask = (m > 127).astype(np.float32)
        sid = os.path.splitext(name)[0]
        out.append(Sample(np.ascontiguousarray(image), int(raw_label), mask, sid))
    if not out:
        raise DataError(f"{labels_csv_path}: no samples listed")
    return out


def load_dataset_dir(path: str) -> list[Sample]:
    """Load the ``images/ labels.csv [masks/]`` layout rooted at ``path``."""
    labels = os.path.join(path, "labels.csv")
    if not os.path.isfile(labels):
        raise DataError(f"{path}: no labels.csv found")
    masks = os.path.join(path, "masks")
    return load_image_dir(os.path.join(path, "images"), labels, masks if os.path.isdir(masks) else None)


def config_dict(config: DataGenConfig) -> dict:
    return asdict(config)
