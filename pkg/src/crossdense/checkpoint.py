"""Binary parameter checkpoints.

Layout, all little-endian:

    magic "DCCE" | version u32 | precision u8 (0=f32, 1=f64) | count u32
    then per tensor:
    name_len u32 | name utf-8 | rank u32 | dims u64 * rank | raw values

Both trainable parameters and buffers (BN running stats, input
normalization) are stored; round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Precision

MAGIC = b"DCCE"
VERSION = 1

_PREC_TAG = {Precision.F32: 0, Precision.F64: 1}
_TAG_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path, model) -> None:
    tensors = list(model.named_params()) + list(model.named_buffers())
    dtype = _TAG_DTYPE[_PREC_TAG[model.precision]]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBI", VERSION, _PREC_TAG[model.precision], len(tensors)))
        for name, t in tensors:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype=dtype).tobytes())


def load_checkpoint(path) -> tuple[Precision, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, tag, count = struct.unpack_from("<IBI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if tag not in _TAG_DTYPE:
        raise CheckpointError(f"{path}: unknown precision tag {tag}")
    dtype = _TAG_DTYPE[tag]
    offset = 4 + struct.calcsize("<IBI")
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, offset)
            offset += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset)
            offset += n * dtype.itemsize
            out[name] = arr.reshape(dims).copy()
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from e
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    precision = Precision.F32 if tag == 0 else Precision.F64
    return precision, out


def apply_checkpoint(model, path) -> None:
    """Load tensors into the model, verifying names and shapes."""
    precision, tensors = load_checkpoint(path)
    if precision is not model.precision:
        raise CheckpointError(
            f"{path}: checkpoint is {precision.value}, model is {model.precision.value}")
    registry = dict(model.named_params())
    registry.update(model.named_buffers())
    missing = sorted(set(registry) - set(tensors))
    extra = sorted(set(tensors) - set(registry))
    if missing or extra:
        raise CheckpointError(
            f"{path}: registry mismatch; missing={missing[:5]} extra={extra[:5]}")
    for name, arr in tensors.items():
        t = registry[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {arr.shape}, model expects {t.data.shape}")
        t.data[...] = arr


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
