"""Central finite-difference gradient verification.

The checker only ever calls an op's forward path, so it stays independent
of the tape machinery it audits. Checks should run under F64: the default
step 1e-5 leaves ~1e-10 truncation error there, hopeless under F32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .tensor import Tape, Tensor, backward

FD_STEP = 1e-5


def fd_gradient(loss_fn: Callable[[], Tensor], t: Tensor, h: float = FD_STEP) -> np.ndarray:
    """d loss / d t by central differences, perturbing t in place."""
    flat = t.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn().item()
        flat[i] = orig - h
        fm = loss_fn().item()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(t.shape)


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference, scaled by the larger gradient magnitude."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


@dataclass
class GradCheckEntry:
    name: str
    rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    def lines(self) -> list[str]:
        out = [f"{e.name}: max_rel_err={e.rel_err:.3e} "
               f"{'ok' if e.passed else 'FAIL'}" for e in self.entries]
        out.append(f"worst={self.worst:.3e} tol={self.tol:.1e} "
                   f"=> {'PASS' if self.passed else 'FAIL'}")
        return out


def _fd_at_indices(loss_fn: Callable[[], Tensor], t: Tensor,
                   idx: np.ndarray, h: float) -> np.ndarray:
    flat = t.data.reshape(-1)
    vals = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn().item()
        flat[i] = orig - h
        fm = loss_fn().item()
        flat[i] = orig
        vals[j] = (fp - fm) / (2.0 * h)
    return vals


def check_gradients(loss_fn: Callable[[], Tensor],
                    named: Iterable[tuple[str, Tensor]],
                    h: float = FD_STEP, tol: float = 1e-4,
                    max_elements: int = 0,
                    rng=None) -> GradCheckReport:
    """Compare tape gradients of loss_fn against central differences.

    ``loss_fn`` must run a fresh forward pass on each call and read the
    current tensor data, so the same closure serves both sides. A positive
    ``max_elements`` caps the finite-difference probes per tensor (random
    subset); 0 checks every element.
    """
    named = list(named)
    for _, t in named:
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)

    entries = []
    for name, t in named:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if max_elements and t.size > max_elements:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = rng.choice(t.size, size=max_elements, replace=False)
        else:
            idx = np.arange(t.size)
        numeric = _fd_at_indices(loss_fn, t, idx, h)
        err = max_rel_error(analytic.reshape(-1)[idx], numeric)
        entries.append(GradCheckEntry(name, err, err < tol))
    return GradCheckReport(entries, tol)


def model_gradcheck(model, images: np.ndarray, labels: np.ndarray,
                    tol: float = 1e-3, h: float = FD_STEP,
                    max_elements: int = 0, rng=None) -> GradCheckReport:
    """Check every model parameter against finite differences.

    Runs in train mode (batch statistics) with the model's configured
    dropout; use a dropout-free model for checking. Running-stat buffers
    drift during probing but never enter the train-mode loss, so the
    finite differences stay well-defined.
    """
    from . import tensor as T

    def loss():
        return T.softmax_cross_entropy(model.forward(images, mode="train"), labels)

    return check_gradients(loss, model.named_params(), h=h, tol=tol,
                           max_elements=max_elements, rng=rng)
