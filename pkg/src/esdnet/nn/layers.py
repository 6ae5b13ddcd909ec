"""Elementary layers wrapping the functional ops."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from esdnet.errors import ConfigError
from esdnet.nn.module import Module, Parameter
from esdnet.tensor import (
    Tensor,
    avg_pool2d,
    batch_norm2d,
    conv2d,
    dropout,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
)


class Conv2d(Module):
    """Convolution with Kaiming (fan-out) normal initialisation."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=False, rng=None):
        super().__init__()
        if min(in_channels, out_channels, kernel_size, stride) < 1:
            raise ConfigError(
                f"Conv2d needs positive sizes, got in={in_channels} out={out_channels} k={kernel_size} s={stride}"
            )
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        std = math.sqrt(2.0 / (out_channels * kernel_size * kernel_size))
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        init = rng.normal(0.0, std, size=shape) if rng is not None else np.zeros(shape)
        self.weight = Parameter(init)
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x, rng=None):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self._buffers["running_var"] = np.ones(channels, dtype=np.float32)

    def forward(self, x, rng=None):
        return batch_norm2d(
            x,
            self.weight,
            self.bias,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
        )


class Linear(Module):
    """Fully connected layer, weight (in, out), uniform +-1/sqrt(fan_in) init."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        if in_features < 1 or out_features < 1:
            raise ConfigError(f"Linear needs positive sizes, got {in_features}x{out_features}")
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / math.sqrt(in_features)
        draw = (lambda shape: rng.uniform(-bound, bound, size=shape)) if rng is not None else np.zeros
        self.weight = Parameter(draw((in_features, out_features)))
        self.bias = Parameter(draw((out_features,))) if bias else None

    def forward(self, x, rng=None):
        return linear(x, self.weight, self.bias)


class ReLU(Module):
    def forward(self, x, rng=None):
        return relu(x)


class Identity(Module):
    def forward(self, x, rng=None):
        return x


class MaxPool2d(Module):
    def __init__(self, kernel: int, stride: Optional[int] = None, padding: int = 0):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride or kernel, padding

    def forward(self, x, rng=None):
        return max_pool2d(x, self.kernel, self.stride, self.padding)


class AvgPool2d(Module):
    def __init__(self, kernel: int, stride: Optional[int] = None):
        super().__init__()
        self.kernel, self.stride = kernel, stride or kernel

    def forward(self, x, rng=None):
        return avg_pool2d(x, self.kernel, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x, rng=None):
        return global_avg_pool(x)


class Dropout(Module):
    """Inverted dropout with drop probability ``p``."""

    def __init__(self, p: float = 0.2):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x: Tensor, rng=None):
        return dropout(x, self.p, rng, self.training)
