"""Dense tensors, the differentiable op set, and reverse-mode autodiff.

A :class:`Tensor` wraps a row-major float array. Ops executed while a
:class:`Tape` is active record one node each; ``backward(tape, loss)``
replays the node list once in reverse and accumulates gradients into the
``grad`` field of every leaf that requires them.

Convolution runs as im2col + one matmul per batch; the naive loop versions
live in the test suite as oracles.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DataError, HyperparamError, NumericError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_MODES = ("train", "eval")


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.F32 else np.float64)


class Tensor:
    """N-dimensional float array with optional gradient storage."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


@dataclass
class TapeNode:
    op: str
    inputs: tuple[int, ...]
    # maps d(out) to per-input gradients; None for leaves
    backward: Optional[Callable[[np.ndarray], tuple]]
    tensor: Tensor


_TLS = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_TLS, "tapes", None)
    if stack is None:
        stack = _TLS.tapes = []
    return stack


class Tape:
    """Recorded computation graph, topologically ordered by construction.

    A tape is single-owner: it records and replays on one thread. The
    active-tape stack is thread-local so read-only evaluation can run
    batches (each with its own tape) concurrently.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._node_of: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def node_id(self, t: Tensor) -> Optional[int]:
        return self._node_of.get(id(t))

    def _ensure_node(self, t: Tensor) -> int:
        nid = self._node_of.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(TapeNode("leaf", (), None, t))
            self._node_of[id(t)] = nid
        return nid

    def _record(self, op: str, inputs: Sequence[Tensor], out: Tensor,
                backward: Callable[[np.ndarray], tuple]) -> None:
        in_ids = tuple(self._ensure_node(t) for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(TapeNode(op, in_ids, backward, out))
        self._node_of[id(out)] = nid


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _apply(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    tape = active_tape()
    if tape is not None and req:
        tape._record(op, inputs, out, backward)
    return out


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into ``grad`` of every requires-grad leaf.

    Fan-out sums contributions; existing ``grad`` buffers are added to, not
    overwritten. ``output`` must be scalar (size 1).
    """
    if output.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    out_id = tape.node_id(output)
    if out_id is not None:
        grads[out_id] = np.ones_like(output.data)
        for nid in range(len(tape.nodes) - 1, -1, -1):
            g = grads.get(nid)
            node = tape.nodes[nid]
            if g is None or node.backward is None:
                continue
            for in_id, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = gi if acc is None else acc + gi
    for nid, node in enumerate(tape.nodes):
        if node.backward is None and node.tensor.requires_grad:
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(node.tensor.data)
            if node.tensor.grad is None:
                node.tensor.grad = g.copy()
            else:
                node.tensor.grad += g


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _apply("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _apply("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, s: float) -> Tensor:
    return _apply("scale", x.data * s, (x,), lambda g: (g * s,))


def shift(x: Tensor, c: float) -> Tensor:
    return _apply("shift", x.data + c, (x,), lambda g: (g,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _apply("log", np.log(xd), (x,), lambda g: (g / xd,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray([x.data.sum()], dtype=x.dtype)
    return _apply("sum_all", out, (x,),
                  lambda g: (np.broadcast_to(g.reshape(()), shape).astype(g.dtype, copy=True),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _apply("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Row softmax over axis 1 of a 2-D tensor, max-stabilized."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects [N,K], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _apply("softmax", p, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra ops

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: x [N,Din] @ w.T [Din,Dout] + b [Dout]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x has {x.shape[1]} features, w expects {w.shape[1]}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def bwd(g):
        return (g @ wd, g.T @ xd, g.sum(axis=0))

    return _apply("linear", out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# convolution / pooling

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_window(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> None:
    if stride < 1:
        raise HyperparamError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise HyperparamError(f"padding must be >= 0, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise HyperparamError(
            f"window {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            hout: int, wout: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, hout, wout), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * hout:stride,
                                  j:j + stride * wout:stride]
    return cols.reshape(n, c * kh * kw, hout * wout)


def _col2im(cols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int,
            padding: int, hout: int, wout: int) -> np.ndarray:
    n, c, h, w = xshape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, hout, wout)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * hout:stride,
               j:j + stride * wout:stride] += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:-padding, padding:-padding]
    return xp


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x [N,Cin,H,W] with w [Cout,Cin,kh,kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape}, {w.shape}")
    n, cin, h, wd_ = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    _check_window(h, wd_, kh, kw, stride, padding)
    hout = _conv_out_size(h, kh, stride, padding)
    wout = _conv_out_size(wd_, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, kh, kw, stride, hout, wout)          # [N, Cin*kh*kw, L]
    wm = w.data.reshape(cout, -1)                           # [Cout, Cin*kh*kw]
    out = np.matmul(wm, cols).reshape(n, cout, hout, wout)
    if b is not None:
        out = out + b.data[:, None, None]

    xshape, wshape = x.shape, w.shape
    has_bias = b is not None
    # skipping unneeded input gradients saves the col2im for data tensors
    need_dx, need_dw = x.requires_grad, w.requires_grad

    def bwd(g):
        gm = g.reshape(n, cout, -1)
        dw = np.einsum("ncl,nkl->ck", gm, cols).reshape(wshape) if need_dw else None
        dx = None
        if need_dx:
            dcols = np.matmul(wm.T, gm)
            dx = _col2im(dcols, xshape, kh, kw, stride, padding, hout, wout)
        if has_bias:
            return (dx, dw, g.sum(axis=(0, 2, 3)))
        return (dx, dw)

    inputs = (x, w) if b is None else (x, w, b)
    return _apply("conv2d", out, inputs, bwd)


def maxpool2d(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Per-window max; backward routes to the first argmax in scan order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    _check_window(h, w, k, k, stride, padding)
    if padding > k // 2:
        raise HyperparamError(f"maxpool2d: padding {padding} > k//2 = {k // 2}")
    hout = _conv_out_size(h, k, stride, padding)
    wout = _conv_out_size(w, k, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    cols = _im2col(xp, k, k, stride, hout, wout).reshape(n, c, k * k, -1)
    idx = cols.argmax(axis=2)
    out = np.take_along_axis(cols, idx[:, :, None, :], axis=2)[:, :, 0, :]
    out = out.reshape(n, c, hout, wout)

    xshape = x.shape

    def bwd(g):
        dcols = np.zeros((n, c, k * k, hout * wout), dtype=g.dtype)
        np.put_along_axis(dcols, idx[:, :, None, :], g.reshape(n, c, 1, -1), axis=2)
        return (_col2im(dcols.reshape(n, c * k * k, -1), xshape, k, k,
                        stride, padding, hout, wout),)

    return _apply("maxpool2d", out, (x,), bwd)


def avgpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Per-window mean; backward spreads gradient uniformly over the window."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    _check_window(h, w, k, k, stride, 0)
    hout = _conv_out_size(h, k, stride, 0)
    wout = _conv_out_size(w, k, stride, 0)

    cols = _im2col(x.data, k, k, stride, hout, wout).reshape(n, c, k * k, -1)
    out = cols.mean(axis=2).reshape(n, c, hout, wout)

    xshape = x.shape

    def bwd(g):
        gw = np.broadcast_to(g.reshape(n, c, 1, -1) / (k * k),
                             (n, c, k * k, hout * wout))
        return (_col2im(gw.reshape(n, c * k * k, -1).astype(g.dtype),
                        xshape, k, k, stride, 0, hout, wout),)

    return _apply("avgpool2d", out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).astype(g.dtype, copy=True),)

    return _apply("global_avg_pool", out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization / regularization

def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: Tensor, running_var: Tensor, mode: str,
                momentum: float = BN_MOMENTUM, epsilon: float = BN_EPS) -> Tensor:
    """Channel batch norm over (N,H,W).

    Train mode normalizes with batch statistics and updates the running
    buffers in place with an exponential moving average; eval mode uses the
    running buffers. Differentiable w.r.t. x, gamma, beta in both modes.
    """
    if mode not in _MODES:
        raise HyperparamError(f"mode must be one of {_MODES}, got {mode!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm2d: {name} shape {t.shape} != ({c},)")

    xd = x.data
    if mode == "train":
        with np.errstate(invalid="ignore", over="ignore"):
            mean = xd.mean(axis=(0, 2, 3))
            var = xd.var(axis=(0, 2, 3))
        if not (np.isfinite(mean).all() and np.isfinite(var).all()):
            raise NumericError("batchnorm2d: non-finite batch statistics")
        running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
        running_var.data[...] = (1 - momentum) * running_var.data + momentum * var
    else:
        mean = running_mean.data
        var = running_var.data

    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (xd - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    gdat = gamma.data

    if mode == "train":
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]

        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dxhat = g * gdat[:, None, None]
            mean_dxhat = dxhat.sum(axis=(0, 2, 3)) / m
            mean_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3)) / m
            dx = inv_std[:, None, None] * (
                dxhat - mean_dxhat[:, None, None] - xhat * mean_dxhat_xhat[:, None, None])
            return (dx, dgamma, dbeta, None, None)
    else:
        def bwd(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = g * (gdat * inv_std)[:, None, None]
            return (dx, dgamma, dbeta, None, None)

    return _apply("batchnorm2d", out, (x, gamma, beta, running_mean, running_var), bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate [N,Ci,H,W] tensors along the channel axis, order preserved."""
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    ref = xs[0].shape
    for i, t in enumerate(xs):
        if t.data.ndim != 4:
            raise ShapeError(f"concat_channels: input {i} is not 4-D ({t.shape})")
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(
                f"concat_channels: input {i} shape {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, splits, axis=1))

    return _apply("concat_channels", out, tuple(xs), bwd)


def dropout(x: Tensor, rate: float, mode: str,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and
    scales survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise HyperparamError(f"dropout rate must be in [0,1), got {rate}")
    if mode not in _MODES:
        raise HyperparamError(f"mode must be one of {_MODES}, got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise HyperparamError("dropout in train mode needs an rng stream")
    keep = (rng.random(x.shape) >= rate)
    scale_ = 1.0 / (1.0 - rate)
    mask = keep.astype(x.dtype) * scale_
    return _apply("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def normalize_channels(x: Tensor, mean: np.ndarray, std: np.ndarray) -> Tensor:
    """Channelwise (x - mean) / std on [N,C,H,W]; differentiable w.r.t. x."""
    if x.data.ndim != 4:
        raise ShapeError(f"normalize_channels expects 4-D input, got {x.shape}")
    c = x.shape[1]
    mean = np.asarray(mean, dtype=x.dtype).reshape(-1)
    std = np.asarray(std, dtype=x.dtype).reshape(-1)
    if mean.shape != (c,) or std.shape != (c,):
        raise ShapeError(f"normalize_channels: stats must have length {c}")
    if np.any(std == 0):
        raise HyperparamError("normalize_channels: zero std")
    inv = (1.0 / std)[:, None, None]
    out = (x.data - mean[:, None, None]) * inv
    return _apply("normalize", out, (x,), lambda g: (g * inv,))


# ---------------------------------------------------------------------------
# loss

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the target labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DataError(f"labels out of range [0,{k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    rows = np.arange(n)
    loss = np.asarray([-logp[rows, labels].mean()], dtype=logits.dtype)

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g.reshape(-1)[0] / n),)

    return _apply("softmax_cross_entropy", loss, (logits,), bwd)
