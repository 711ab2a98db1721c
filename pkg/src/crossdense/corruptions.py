"""Common-corruption generators and the mean-corruption-error protocol.

Four kinds are implemented (gaussian_noise, gaussian_blur, fog, contrast);
the rest of the usual benchmark suite is registered as named extension
points. Severity parameters ship in a plain-text table next to the code,
not hardcoded, and must grow strictly in strength with severity.

CE for one kind is the *sum* of top-1 errors over severities 1..5; mCE is
100 times the mean over kinds of CE(model)/CE(baseline).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import rng as rng_mod
from .data import LabeledImageSet, write_records
from .errors import ConfigError, DataError, NumericError
from .model import Model

CORRUPTION_KINDS = ("gaussian_noise", "gaussian_blur", "fog", "contrast")

# recognized benchmark kinds without an implementation here
EXTENSION_KINDS = ("shot_noise", "impulse_noise", "glass_blur", "motion_blur",
                   "zoom_blur", "snow", "frost", "brightness",
                   "elastic_transform", "pixelate", "jpeg_compression")

SEVERITIES = (1, 2, 3, 4, 5)

_PARAM_KEY = {"gaussian_noise": "sigma", "gaussian_blur": "sigma",
              "contrast": "factor", "fog": "t"}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def validate(self) -> "CorruptionSpec":
        if self.kind in EXTENSION_KINDS:
            raise ConfigError(
                f"corruption {self.kind!r} is a registered extension point "
                "without an implementation")
        if self.kind not in CORRUPTION_KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ConfigError(
                f"severity must be in {list(SEVERITIES)}, got {self.severity}")
        return self


class CorruptionTable:
    """Per-(kind, severity) parameters, strength strictly increasing."""

    def __init__(self, params: dict[str, tuple[float, ...]]):
        self.params = params
        for kind in CORRUPTION_KINDS:
            if kind not in params:
                raise ConfigError(f"corruption table missing kind {kind}")
            values = params[kind]
            if len(values) != len(SEVERITIES):
                raise ConfigError(
                    f"{kind}: expected {len(SEVERITIES)} severity values, "
                    f"got {len(values)}")
            strengths = [1.0 - v if kind == "contrast" else v for v in values]
            if not all(a < b for a, b in zip(strengths, strengths[1:])):
                raise ConfigError(
                    f"{kind}: severity strength must increase strictly, "
                    f"got {values}")

    def value(self, kind: str, severity: int) -> float:
        return self.params[kind][severity - 1]

    @classmethod
    def parse(cls, text: str) -> "CorruptionTable":
        params: dict[str, tuple[float, ...]] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"corruption table: bad line {line!r}")
            key, values = line.split("=", 1)
            kind, param = key.strip().rsplit(".", 1)
            if _PARAM_KEY.get(kind) != param:
                raise ConfigError(f"corruption table: unexpected key {key.strip()!r}")
            params[kind] = tuple(float(v) for v in values.split())
        return cls(params)

    @classmethod
    def load(cls, path: Optional[str] = None) -> "CorruptionTable":
        if path is not None:
            return cls.parse(Path(path).read_text())
        text = resources.files("crossdense").joinpath(
            "tables/corruption_table.txt").read_text()
        return cls.parse(text)


# ---------------------------------------------------------------------------
# generators (single image [C,H,W] in [0,1] -> same, clipped)

def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    i = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = _gaussian_kernel(sigma)
    r = len(k) // 2
    h, w = img.shape[1], img.shape[2]
    pad = np.pad(img, ((0, 0), (r, r), (0, 0)), mode="reflect")
    img = sum(k[j] * pad[:, j:j + h, :] for j in range(len(k)))
    pad = np.pad(img, ((0, 0), (0, 0), (r, r)), mode="reflect")
    return sum(k[j] * pad[:, :, j:j + w] for j in range(len(k)))


def _diamond_square(exp: int, rng: np.random.Generator) -> np.ndarray:
    """Plasma fractal on a (2^exp + 1) square grid, min-max normalized."""
    size = 2 ** exp + 1
    g = np.zeros((size, size))
    g[0, 0], g[0, -1], g[-1, 0], g[-1, -1] = rng.random(4)
    step, amp = size - 1, 0.5
    while step > 1:
        half = step // 2
        for y in range(half, size, step):
            for x in range(half, size, step):
                avg = (g[y - half, x - half] + g[y - half, x + half] +
                       g[y + half, x - half] + g[y + half, x + half]) / 4.0
                g[y, x] = avg + rng.uniform(-amp, amp)
        for y in range(0, size, half):
            xstart = half if (y // half) % 2 == 0 else 0
            for x in range(xstart, size, step):
                vals = []
                if y >= half:
                    vals.append(g[y - half, x])
                if y + half < size:
                    vals.append(g[y + half, x])
                if x >= half:
                    vals.append(g[y, x - half])
                if x + half < size:
                    vals.append(g[y, x + half])
                g[y, x] = sum(vals) / len(vals) + rng.uniform(-amp, amp)
        step, amp = half, amp * 0.55
    lo, hi = g.min(), g.max()
    return (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)


def fog_field(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    exp = max(1, math.ceil(math.log2(max(h, w))))
    return _diamond_square(exp, rng)[:h, :w]


def corrupt(x: np.ndarray, spec: CorruptionSpec,
            table: Optional[CorruptionTable] = None,
            rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Apply one corruption to a [C,H,W] image in [0,1]."""
    spec.validate()
    table = table or _default_table()
    value = table.value(spec.kind, spec.severity)
    if rng is None:
        rng = rng_mod.stream(spec.seed, spec.kind, spec.severity)
    img = x.astype(np.float64)

    if spec.kind == "gaussian_noise":
        if value > 0:
            img = img + rng.normal(0.0, value, img.shape)
    elif spec.kind == "gaussian_blur":
        if value > 0:
            img = _blur(img, value)
    elif spec.kind == "contrast":
        mean = img.mean()
        img = (img - mean) * value + mean
    elif spec.kind == "fog":
        field = fog_field(img.shape[1], img.shape[2], rng)
        img = img * (1.0 - value) + value * field[None, :, :]

    return np.clip(img, 0.0, 1.0).astype(x.dtype)


def corrupt_dataset(dataset: LabeledImageSet, kind: str, severity: int,
                    seed: int = 0,
                    table: Optional[CorruptionTable] = None) -> LabeledImageSet:
    """Corrupt every image, one independent stream per image index."""
    spec = CorruptionSpec(kind, severity, seed=seed)
    images = np.stack([
        corrupt(dataset.images[i], spec, table=table,
                rng=rng_mod.stream(seed, kind, severity, i))
        for i in range(len(dataset))])
    return LabeledImageSet(images, dataset.labels.copy(), dataset.class_count,
                           f"{dataset.split}:{kind}@{severity}")


_TABLE_CACHE: Optional[CorruptionTable] = None


def _default_table() -> CorruptionTable:
    global _TABLE_CACHE
    if _TABLE_CACHE is None:
        _TABLE_CACHE = CorruptionTable.load()
    return _TABLE_CACHE


# ---------------------------------------------------------------------------
# evaluation protocol

def severity_errors(predict: Callable[[np.ndarray], np.ndarray],
                    dataset: LabeledImageSet, kind: str, seed: int = 0,
                    table: Optional[CorruptionTable] = None,
                    severities=SEVERITIES) -> list[float]:
    if len(dataset) == 0:
        raise DataError("severity_errors: empty dataset")
    errors = []
    for s in severities:
        corrupted = corrupt_dataset(dataset, kind, s, seed=seed, table=table)
        preds = predict(corrupted.images)
        errors.append(float((preds != corrupted.labels).mean()))
    return errors


def model_predict(model: Model, batch_size: int = 256) -> Callable[[np.ndarray], np.ndarray]:
    def predict(images: np.ndarray) -> np.ndarray:
        out = []
        for start in range(0, images.shape[0], batch_size):
            logits = model.forward(images[start:start + batch_size], mode="eval")
            out.append(logits.data.argmax(axis=1))
        return np.concatenate(out)
    return predict


def corruption_error(model: Model, clean_testset: LabeledImageSet, kind: str,
                     seed: int = 0, table: Optional[CorruptionTable] = None,
                     batch_size: int = 256) -> float:
    """CE_kind = sum over severities of the top-1 error on the corrupted set."""
    return float(sum(severity_errors(model_predict(model, batch_size),
                                     clean_testset, kind, seed=seed, table=table)))


def mce(model_ce: dict[str, float], baseline_ce: dict[str, float]) -> float:
    """100 * mean over kinds of CE(model)/CE(baseline); lower is better."""
    if set(model_ce) != set(baseline_ce):
        raise ConfigError(
            f"mce: kind sets differ: {sorted(model_ce)} vs {sorted(baseline_ce)}")
    if not model_ce:
        raise ConfigError("mce: empty kind set")
    ratios = []
    for kind in model_ce:
        if baseline_ce[kind] <= 0:
            raise NumericError(
                f"mce: baseline CE for {kind} is {baseline_ce[kind]}; "
                "a perfect baseline makes the ratio degenerate")
        ratios.append(model_ce[kind] / baseline_ce[kind])
    return 100.0 * float(np.mean(ratios))


def cache_corrupted_sets(dataset: LabeledImageSet, kinds, outdir, seed: int = 0,
                         table: Optional[CorruptionTable] = None) -> list[Path]:
    """One record-format file per (kind, severity); bytes are seed-stable."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind in kinds:
        for s in SEVERITIES:
            corrupted = corrupt_dataset(dataset, kind, s, seed=seed, table=table)
            path = outdir / f"corrupted_{kind}_s{s}.bin"
            write_records(path, corrupted.images, corrupted.labels)
            paths.append(path)
    return paths
