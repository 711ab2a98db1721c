"""Composable network units: dense layers and blocks, transitions, the
7x7 stem, the classifier head, and a plain conv stage for baselines.

Units hold their parameter tensors and expose ``named_params`` /
``named_buffers`` with relative names; models prefix them into a flat
registry. Convolutions are bias-free except the head's fully connected
layer, following the usual batch-norm convention.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def he_normal(rng: np.random.Generator, shape: tuple, dtype) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)


def fc_uniform(rng: np.random.Generator, dout: int, din: int, dtype) -> tuple[Tensor, Tensor]:
    limit = 1.0 / math.sqrt(din)
    w = Tensor(rng.uniform(-limit, limit, (dout, din)), requires_grad=True, dtype=dtype)
    b = Tensor(rng.uniform(-limit, limit, dout), requires_grad=True, dtype=dtype)
    return w, b


class BatchNorm2d:
    def __init__(self, channels: int, dtype):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = Tensor(np.zeros(channels), dtype=dtype)
        self.running_var = Tensor(np.ones(channels), dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta,
                             self.running_mean, self.running_var, mode)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self) -> Iterator[tuple[str, Tensor]]:
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class DenseLayer:
    """Pre-activation unit: BN -> ReLU -> 3x3 conv adding ``growth_rate``
    channels, concatenated onto its input."""

    def __init__(self, cin: int, growth_rate: int, rng: np.random.Generator, dtype):
        self.cin = cin
        self.growth_rate = growth_rate
        self.bn = BatchNorm2d(cin, dtype)
        self.conv_w = he_normal(rng, (growth_rate, cin, 3, 3), dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(
                f"dense layer expects {self.cin} channels, got {x.shape[1]}")
        new = T.conv2d(T.relu(self.bn.forward(x, mode)), self.conv_w,
                       stride=1, padding=1)
        return T.concat_channels([x, new])

    def named_params(self):
        for n, t in self.bn.named_params():
            yield f"bn.{n}", t
        yield "conv_w", self.conv_w

    def named_buffers(self):
        for n, t in self.bn.named_buffers():
            yield f"bn.{n}", t


class DenseBlock:
    """Stack of dense layers; channel count grows by growth_rate per layer.

    Dropout, when enabled, masks the block's output in train mode.
    """

    def __init__(self, cin: int, growth_rate: int, num_layers: int,
                 dropout_rate: float, rng: np.random.Generator, dtype):
        self.cin = cin
        self.dropout_rate = dropout_rate
        self.layers = [DenseLayer(cin + i * growth_rate, growth_rate, rng, dtype)
                       for i in range(num_layers)]
        self.cout = cin + num_layers * growth_rate

    def forward(self, x: Tensor, mode: str,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        for i, layer in enumerate(self.layers):
            if x.shape[1] != layer.cin:
                raise ShapeError(
                    f"dense block layer {i} expects {layer.cin} channels, "
                    f"got {x.shape[1]}")
            x = layer.forward(x, mode)
        if self.dropout_rate > 0:
            x = T.dropout(x, self.dropout_rate, mode, rng)
        return x

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for n, t in layer.named_params():
                yield f"layer{i + 1}.{n}", t

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for n, t in layer.named_buffers():
                yield f"layer{i + 1}.{n}", t


class TransitionLayer:
    """BN -> ReLU -> 1x1 conv compressing channels by θ -> 2x2 avg pool."""

    def __init__(self, cin: int, compression: float, rng: np.random.Generator, dtype):
        if not 0.0 < compression <= 1.0:
            raise ShapeError(f"compression must be in (0,1], got {compression}")
        self.cin = cin
        self.cout = int(math.floor(compression * cin))
        if self.cout < 1:
            raise ShapeError(
                f"compression {compression} of {cin} channels leaves none")
        self.bn = BatchNorm2d(cin, dtype)
        self.conv_w = he_normal(rng, (self.cout, cin, 1, 1), dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(
                f"transition expects {self.cin} channels, got {x.shape[1]}")
        h, w = x.shape[2], x.shape[3]
        if h % 2 or w % 2:
            raise ShapeError(
                f"transition needs even spatial dims for 2x2 pooling, got {h}x{w}")
        out = T.conv2d(T.relu(self.bn.forward(x, mode)), self.conv_w)
        return T.avgpool2d(out, k=2, stride=2)

    def named_params(self):
        for n, t in self.bn.named_params():
            yield f"bn.{n}", t
        yield "conv_w", self.conv_w

    def named_buffers(self):
        for n, t in self.bn.named_buffers():
            yield f"bn.{n}", t


class Stem:
    """7x7 stride-2 pad-3 conv, BN, ReLU, then 3x3 max pool stride 2 pad 1;
    spatial size drops 4x overall."""

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dtype):
        self.in_channels = in_channels
        self.cout = out_channels
        self.conv_w = he_normal(rng, (out_channels, in_channels, 7, 7), dtype)
        self.bn = BatchNorm2d(out_channels, dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        if x.shape[2] < 8 or x.shape[3] < 8:
            raise ShapeError(
                f"stem needs at least 8x8 input, got {x.shape[2]}x{x.shape[3]}")
        out = T.conv2d(x, self.conv_w, stride=2, padding=3)
        out = T.relu(self.bn.forward(out, mode))
        return T.maxpool2d(out, k=3, stride=2, padding=1)

    def named_params(self):
        yield "conv_w", self.conv_w
        for n, t in self.bn.named_params():
            yield f"bn.{n}", t

    def named_buffers(self):
        for n, t in self.bn.named_buffers():
            yield f"bn.{n}", t


class Head:
    """Fully connected classifier over the fused, pooled feature vector."""

    def __init__(self, in_features: int, num_classes: int,
                 rng: np.random.Generator, dtype):
        self.in_features = in_features
        self.fc_w, self.fc_b = fc_uniform(rng, num_classes, in_features, dtype)

    def forward(self, fused: Tensor) -> Tensor:
        if fused.shape[1] != self.in_features:
            raise ShapeError(
                f"head expects {self.in_features} features, got {fused.shape[1]}")
        return T.linear(fused, self.fc_w, self.fc_b)

    def named_params(self):
        yield "fc_w", self.fc_w
        yield "fc_b", self.fc_b

    def named_buffers(self):
        return iter(())


class PlainStage:
    """Conv3x3 -> BN -> ReLU (xN), optional 2x2 max pool at the end.

    Building block of the plain CNN baseline.
    """

    def __init__(self, cin: int, cout: int, num_convs: int, pool: bool,
                 rng: np.random.Generator, dtype):
        self.cin = cin
        self.cout = cout
        self.pool = pool
        self.convs = []
        self.bns = []
        c = cin
        for _ in range(num_convs):
            self.convs.append(he_normal(rng, (cout, c, 3, 3), dtype))
            self.bns.append(BatchNorm2d(cout, dtype))
            c = cout

    def forward(self, x: Tensor, mode: str,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(
                f"stage expects {self.cin} channels, got {x.shape[1]}")
        for w, bn in zip(self.convs, self.bns):
            x = T.relu(bn.forward(T.conv2d(x, w, stride=1, padding=1), mode))
        if self.pool:
            x = T.maxpool2d(x, k=2, stride=2)
        return x

    def named_params(self):
        for i, (w, bn) in enumerate(zip(self.convs, self.bns)):
            yield f"conv{i + 1}_w", w
            for n, t in bn.named_params():
                yield f"bn{i + 1}.{n}", t

    def named_buffers(self):
        for i, bn in enumerate(self.bns):
            for n, t in bn.named_buffers():
                yield f"bn{i + 1}.{n}", t
