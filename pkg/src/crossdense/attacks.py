"""White-box L-inf attacks (FGSM, PGD) and robust accuracy.

Attacks operate on the [0,1] pixel scale; input normalization is part of
the model, so an epsilon of 0.03 means 0.03 of the pixel range. Gradients
are taken with the model in eval mode (running BN stats, dropout off):
the attack targets the deployed model.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .data import LabeledImageSet
from .errors import DataError, HyperparamError
from .model import Model
from .tensor import Tape, Tensor, backward


@dataclass
class AttackParams:
    epsilon: float
    steps: int = 10
    step_size: Optional[float] = None  # defaults to epsilon / 4
    random_start: bool = True
    norm: str = "linf"

    def validate(self) -> "AttackParams":
        if not 0.0 <= self.epsilon <= 1.0:
            raise HyperparamError(f"epsilon must be in [0,1], got {self.epsilon}")
        if self.norm != "linf":
            raise HyperparamError(f"only the linf norm is supported, got {self.norm!r}")
        if self.steps < 0:
            raise HyperparamError(f"steps must be >= 0, got {self.steps}")
        if self.steps > 0 and self.epsilon > 0 and self.alpha <= 0:
            raise HyperparamError(f"step_size must be > 0, got {self.alpha}")
        return self

    @property
    def alpha(self) -> float:
        return self.epsilon / 4.0 if self.step_size is None else self.step_size


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d loss / d x at the given images, model in eval mode."""
    xt = Tensor(np.ascontiguousarray(x), requires_grad=True,
                dtype=model.precision.dtype)
    with Tape() as tape:
        loss = T.softmax_cross_entropy(model.forward(xt, mode="eval"), y)
    backward(tape, loss)
    return xt.grad


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """x_adv = clip01(x + eps * sign(d loss / d x))."""
    if epsilon < 0:
        raise HyperparamError(f"epsilon must be >= 0, got {epsilon}")
    x = np.asarray(x, dtype=model.precision.dtype)
    if epsilon == 0:
        return x.copy()
    g = input_gradient(model, x, y)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


def pgd(model: Model, x: np.ndarray, y: np.ndarray, params: AttackParams,
        rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Iterated FGSM with projection onto the eps-ball and the pixel box.

    With steps=1, step_size=epsilon, and no random start this reduces to
    fgsm() bit-for-bit.
    """
    params.validate()
    x = np.asarray(x, dtype=model.precision.dtype)
    if params.steps == 0 or params.epsilon == 0:
        return x.copy()
    eps, alpha = params.epsilon, params.alpha
    lo, hi = x - eps, x + eps

    adv = x.copy()
    if params.random_start:
        if rng is None:
            rng = rng_mod.stream(0, "pgd")
        adv = np.clip(adv + rng.uniform(-eps, eps, size=x.shape), 0.0, 1.0)
        adv = np.clip(adv, lo, hi).astype(x.dtype)
    for _ in range(params.steps):
        g = input_gradient(model, adv, y)
        adv = adv + alpha * np.sign(g)
        adv = np.clip(np.clip(adv, lo, hi), 0.0, 1.0)
    return adv


def _attack_batch(model: Model, xb: np.ndarray, yb: np.ndarray,
                  kind: str, params: AttackParams,
                  rng: Optional[np.random.Generator]) -> np.ndarray:
    if kind == "fgsm":
        return fgsm(model, xb, yb, params.epsilon)
    if kind == "pgd":
        return pgd(model, xb, yb, params, rng=rng)
    raise HyperparamError(f"unknown attack kind {kind!r}")


def robust_accuracy(model: Model, dataset: LabeledImageSet, kind: str,
                    params: AttackParams, batch_size: int = 128,
                    seed: int = 0, workers: int = 1) -> float:
    """Fraction of samples still classified correctly after the attack."""
    if len(dataset) == 0:
        raise DataError("robust_accuracy: empty dataset")
    starts = list(range(0, len(dataset), batch_size))

    def run(bi_start):
        bi, start = bi_start
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        adv = _attack_batch(model, xb, yb, kind, params,
                            rng_mod.stream(seed, "attack", kind, bi))
        preds = model.forward(adv, mode="eval").data.argmax(axis=1)
        return int((preds == yb).sum())

    jobs = list(enumerate(starts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            correct = sum(pool.map(run, jobs))
    else:
        correct = sum(map(run, jobs))
    return correct / len(dataset)
