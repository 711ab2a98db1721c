"""Dataset ingestion, synthetic desk-scale data, augmentation, normalization.

Binary record layout (shared with the corruption cache): one record is a
label header followed by C planes of H*W row-major pixel bytes. CIFAR-10
uses a 1-byte label and 32x32x3 planes (3073 bytes/record); CIFAR-100
prepends a coarse label byte (3074 bytes/record, fine label exposed).

Synthetic images are quantized to the u8 grid at creation, so writing a
set in the record format and reloading it is bit-exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from . import rng as rng_mod
from .errors import DataError, HyperparamError

# channel statistics of the CIFAR-10 train split, used by configs that
# enable input normalization on real data
CIFAR10_CHANNEL_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_CHANNEL_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class LabeledImageSet:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {self.images.shape}")
        n = self.images.shape[0]
        if n < 1:
            raise DataError("empty image set")
        if self.labels.shape != (n,):
            raise DataError(f"labels shape {self.labels.shape} != ({n},)")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise DataError(
                f"labels outside [0,{self.class_count}): "
                f"min={self.labels.min()} max={self.labels.max()}")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def subset(self, idx) -> "LabeledImageSet":
        return LabeledImageSet(self.images[idx], self.labels[idx],
                               self.class_count, self.split)


@dataclass
class AugmentConfig:
    crop_padding: int = 4
    flip_prob: float = 0.5
    rotation_degrees: float = 15.0
    enabled: bool = True

    def validate(self) -> "AugmentConfig":
        if not 0.0 <= self.flip_prob <= 1.0:
            raise HyperparamError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.crop_padding < 0 or self.rotation_degrees < 0:
            raise HyperparamError("crop_padding and rotation_degrees must be >= 0")
        return self


# ---------------------------------------------------------------------------
# binary record IO

def quantize_u8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)


def write_records(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write a set in the CIFAR-style binary record layout (1 label byte)."""
    imgs = images if images.dtype == np.uint8 else quantize_u8(images)
    n, c, h, w = imgs.shape
    with open(path, "wb") as f:
        for i in range(n):
            f.write(bytes([int(labels[i])]))
            f.write(imgs[i].tobytes())


def read_records(path, height: int, width: int, channels: int = 3,
                 class_count: int = 10, label_bytes: int = 1,
                 split: str = "") -> LabeledImageSet:
    """Read the binary record layout; the *last* label byte is the label."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing dataset file: {path}")
    blob = path.read_bytes()
    record = label_bytes + channels * height * width
    if len(blob) == 0 or len(blob) % record:
        raise DataError(
            f"{path}: short read, {len(blob)} bytes is not a multiple of "
            f"record size {record} (remainder {len(blob) % record})")
    n = len(blob) // record
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    bad = np.nonzero(labels >= class_count)[0]
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"{path}: label {labels[i]} >= {class_count} in record {i} "
            f"(byte offset {i * record + label_bytes - 1})")
    images = raw[:, label_bytes:].reshape(n, channels, height, width)
    images = images.astype(np.float32) / 255.0
    return LabeledImageSet(images, labels, class_count, split)


def load_cifar10(directory) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Load the 6 standard CIFAR-10 binary batch files."""
    directory = Path(directory)
    train_parts = [read_records(directory / f"data_batch_{i}.bin", 32, 32,
                                class_count=10, split="train")
                   for i in range(1, 6)]
    train = LabeledImageSet(
        np.concatenate([p.images for p in train_parts]),
        np.concatenate([p.labels for p in train_parts]), 10, "train")
    test = read_records(directory / "test_batch.bin", 32, 32,
                        class_count=10, split="test")
    return train, test


def load_cifar100(directory) -> tuple[LabeledImageSet, LabeledImageSet]:
    """CIFAR-100 binary layout: coarse+fine label bytes; fine labels exposed."""
    directory = Path(directory)
    train = read_records(directory / "train.bin", 32, 32, class_count=100,
                         label_bytes=2, split="train")
    test = read_records(directory / "test.bin", 32, 32, class_count=100,
                        label_bytes=2, split="test")
    return train, test


# ---------------------------------------------------------------------------
# synthetic data

def synthetic_dataset(n: int, classes: int, size: int = 16,
                      difficulty: str = "separable", seed: int = 0,
                      split: str = "train") -> LabeledImageSet:
    """Class-conditional images: an oriented grating plus a class-placed
    blob, channel-tinted per class. ``separable`` has crisp structure a
    linear probe can exploit; ``noisy`` shrinks contrast and adds pixel
    noise so small-margin effects appear.
    """
    if n < classes:
        raise DataError(f"need at least one sample per class: n={n} < classes={classes}")
    if difficulty not in ("separable", "noisy"):
        raise DataError(f"difficulty must be separable or noisy, got {difficulty!r}")
    crisp = difficulty == "separable"
    contrast = 0.35 if crisp else 0.10
    noise_sigma = 0.02 if crisp else 0.15
    jitter = 1 if crisp else 2

    labels = np.arange(n) % classes  # balanced by construction
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, 3, size, size), dtype=np.float64)
    for i in range(n):
        c = int(labels[i])
        g = rng_mod.stream(seed, "synthetic", split, i)
        theta = math.pi * c / classes + g.normal(0, 0.06)
        phase = g.uniform(0, 2 * math.pi)
        freq = 2.0 * math.pi * 2.5 / size
        grating = np.sin(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)

        ang = 2 * math.pi * c / classes
        cx = size / 2 + 0.28 * size * math.cos(ang) + g.integers(-jitter, jitter + 1)
        cy = size / 2 + 0.28 * size * math.sin(ang) + g.integers(-jitter, jitter + 1)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (size / 7.0) ** 2))

        base = 0.5 + contrast * grating + 1.6 * contrast * blob
        gains = 0.7 + 0.3 * np.roll([1.0, 0.4, 0.1], c % 3)
        img = base[None, :, :] * gains[:, None, None]
        img += g.normal(0, noise_sigma, img.shape)
        images[i] = img
    images = np.clip(images, 0.0, 1.0)
    # land exactly on the u8 grid so record-format round trips are bit-exact
    images = quantize_u8(images).astype(np.float32) / 255.0
    return LabeledImageSet(images, labels.astype(np.int64), classes, split)


# ---------------------------------------------------------------------------
# augmentation

def _rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    c, h, w = img.shape
    rad = math.radians(degrees)
    cos_t, sin_t = math.cos(rad), math.sin(rad)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: rotate destination coords back into the source frame
    xs = cos_t * (xx - cx) + sin_t * (yy - cy) + cx
    ys = -sin_t * (xx - cx) + cos_t * (yy - cy) + cy
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    wx, wy = xs - x0, ys - y0
    out = np.zeros_like(img)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            weight = (wx if dx else 1 - wx) * (wy if dy else 1 - wy)
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xi_c, yi_c = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
            out += img[:, yi_c, xi_c] * (weight * valid)[None, :, :]
    return out


def augment(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Crop -> flip -> rotate, in that fixed order; shape-preserving."""
    cfg.validate()
    if not cfg.enabled:
        return x
    c, h, w = x.shape
    out = x.astype(np.float64)
    if cfg.crop_padding > 0:
        p = cfg.crop_padding
        padded = np.pad(out, ((0, 0), (p, p), (p, p)), mode="reflect")
        oy = int(rng.integers(0, 2 * p + 1))
        ox = int(rng.integers(0, 2 * p + 1))
        out = padded[:, oy:oy + h, ox:ox + w]
    if rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]
    if cfg.rotation_degrees > 0:
        deg = float(rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees))
        out = _rotate_bilinear(np.ascontiguousarray(out), deg)
    return np.clip(out, 0.0, 1.0).astype(x.dtype)


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    """Channelwise (x - mean) / std for [N,C,H,W] or [C,H,W] arrays."""
    mean = np.asarray(mean, dtype=x.dtype)
    std = np.asarray(std, dtype=x.dtype)
    if np.any(std == 0):
        raise HyperparamError("normalize: zero std")
    shape = (-1, 1, 1) if x.ndim == 3 else (1, -1, 1, 1)
    return (x - mean.reshape(shape)) / std.reshape(shape)


def denormalize(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=x.dtype)
    std = np.asarray(std, dtype=x.dtype)
    shape = (-1, 1, 1) if x.ndim == 3 else (1, -1, 1, 1)
    return x * std.reshape(shape) + mean.reshape(shape)
