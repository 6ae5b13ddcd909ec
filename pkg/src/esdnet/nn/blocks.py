"""Backbone building blocks for the residual, dense and plain (VGG) families.

Each block exposes ``in_channels``, ``out_channels`` and ``output_shape``
so branch topologies can be checked statically, without a forward pass.
"""

from __future__ import annotations

from typing import Sequence

from esdnet.errors import ConfigError
from esdnet.nn.layers import AvgPool2d, BatchNorm2d, Conv2d, GlobalAvgPool, Identity, Linear, MaxPool2d, ReLU
from esdnet.nn.module import Module, Sequential
from esdnet.tensor import concat, relu


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


class Block(Module):
    in_channels: int
    out_channels: int

    def output_shape(self, shape: Sequence[int]) -> tuple:
        raise NotImplementedError


class Stem(Block):
    """``conv`` (f0): one or more convolutions, optional BN, ReLU, optional max pool."""

    def __init__(self, in_channels, channels, kernel=3, stride=1, convs=1, norm=True, pool=0, rng=None):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, channels
        self.kernel, self.stride, self.pool_kernel = kernel, stride, pool
        layers = []
        c = in_channels
        for i in range(convs):
            s = stride if i == 0 else 1
            layers.append(Conv2d(c, channels, kernel, s, kernel // 2, bias=not norm, rng=rng))
            if norm:
                layers.append(BatchNorm2d(channels))
            layers.append(ReLU())
            c = channels
        self.convs_count = convs
        if pool:
            layers.append(MaxPool2d(pool, 2, 1 if pool == 3 else 0))
        self.body = Sequential(*layers)

    def forward(self, x, rng=None):
        return self.body(x, rng)

    def output_shape(self, shape):
        _, h, w = shape
        k, p = self.kernel, self.kernel // 2
        h, w = _conv_out(h, k, self.stride, p), _conv_out(w, k, self.stride, p)
        if self.pool_kernel:
            pk, pp = self.pool_kernel, 1 if self.pool_kernel == 3 else 0
            h, w = _conv_out(h, pk, 2, pp), _conv_out(w, pk, 2, pp)
        return self.out_channels, h, w


class BasicBlock(Block):
    """Two 3x3 conv-BN layers plus a shortcut (1x1 conv-BN projection when the shape changes)."""

    def __init__(self, in_channels, out_channels, stride=1, rng=None):
        super().__init__()
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, 1, rng=rng)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, rng=rng)
        self.bn2 = BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Sequential(Conv2d(in_channels, out_channels, 1, stride, 0, rng=rng), BatchNorm2d(out_channels))
        else:
            self.shortcut = Identity()

    def forward(self, x, rng=None):
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return relu(out + self.shortcut(x))

    def output_shape(self, shape):
        _, h, w = shape
        return self.out_channels, _conv_out(h, 3, self.stride, 1), _conv_out(w, 3, self.stride, 1)


class Bottleneck(Block):
    """1x1 -> 3x3 (strided) -> 1x1 residual block with expansion 4."""

    expansion = 4

    def __init__(self, in_channels, out_channels, stride=1, rng=None):
        super().__init__()
        width = out_channels // self.expansion
        self.in_channels, self.out_channels, self.stride = in_channels, out_channels, stride
        self.conv1 = Conv2d(in_channels, width, 1, rng=rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, stride, 1, rng=rng)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_channels, 1, rng=rng)
        self.bn3 = BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Sequential(Conv2d(in_channels, out_channels, 1, stride, 0, rng=rng), BatchNorm2d(out_channels))
        else:
            self.shortcut = Identity()

    def forward(self, x, rng=None):
        out = relu(self.bn1(self.conv1(x)))
        out = relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return relu(out + self.shortcut(x))

    def output_shape(self, shape):
        _, h, w = shape
        return self.out_channels, _conv_out(h, 3, self.stride, 1), _conv_out(w, 3, self.stride, 1)


class DenseLayer(Module):
    def __init__(self, in_channels, growth_rate, bn_size, rng=None):
        super().__init__()
        self.bn1 = BatchNorm2d(in_channels)
        self.conv1 = Conv2d(in_channels, bn_size * growth_rate, 1, rng=rng)
        self.bn2 = BatchNorm2d(bn_size * growth_rate)
        self.conv2 = Conv2d(bn_size * growth_rate, growth_rate, 3, 1, 1, rng=rng)

    def forward(self, x, rng=None):
        new = self.conv1(relu(self.bn1(x)))
        new = self.conv2(relu(self.bn2(new)))
        return concat([x, new], axis=1)


class Transition(Module):
    def __init__(self, in_channels, out_channels, rng=None):
        super().__init__()
        self.bn = BatchNorm2d(in_channels)
        self.conv = Conv2d(in_channels, out_channels, 1, rng=rng)
        self.pool = AvgPool2d(2)

    def forward(self, x, rng=None):
        return self.pool(self.conv(relu(self.bn(x))))


class DenseStage(Block):
    """Optional halving transition, then a dense block; the last stage adds the final BN-ReLU."""

    def __init__(self, in_channels, num_layers, growth_rate=32, bn_size=4, transition=False, final_norm=False, rng=None):
        super().__init__()
        self.in_channels = in_channels
        self.has_transition = transition
        c = in_channels
        if transition:
            self.transition = Transition(c, c // 2, rng=rng)
            c //= 2
        layers = []
        for _ in range(num_layers):
            layers.append(DenseLayer(c, growth_rate, bn_size, rng=rng))
            c += growth_rate
        self.dense = Sequential(*layers)
        self.final = Sequential(BatchNorm2d(c), ReLU()) if final_norm else Identity()
        self.out_channels = c

    def forward(self, x, rng=None):
        if self.has_transition:
            x = self.transition(x)
        return self.final(self.dense(x))

    def output_shape(self, shape):
        _, h, w = shape
        if self.has_transition:
            h, w = h // 2, w // 2
        return self.out_channels, h, w


class VggStage(Block):
    """Optional 2x2 max pool, then ``n`` 3x3 conv-ReLU layers (with bias, no BN)."""

    def __init__(self, in_channels, out_channels, num_convs, pool=False, rng=None):
        super().__init__()
        self.in_channels, self.out_channels, self.pool = in_channels, out_channels, pool
        layers = [MaxPool2d(2)] if pool else []
        c = in_channels
        for _ in range(num_convs):
            layers += [Conv2d(c, out_channels, 3, 1, 1, bias=True, rng=rng), ReLU()]
            c = out_channels
        self.body = Sequential(*layers)

    def forward(self, x, rng=None):
        return self.body(x, rng)

    def output_shape(self, shape):
        _, h, w = shape
        if self.pool:
            h, w = h // 2, w // 2
        return self.out_channels, h, w


class Stage(Block):
    """``layer_k``: a run of residual blocks, the first one carrying the stride."""

    def __init__(self, blocks: Sequence[Block]):
        super().__init__()
        self.blocks = Sequential(*blocks)
        self.in_channels = blocks[0].in_channels
        self.out_channels = blocks[-1].out_channels

    def forward(self, x, rng=None):
        return self.blocks(x, rng)

    def output_shape(self, shape):
        for b in self.blocks:
            shape = b.output_shape(shape)
        return tuple(shape)


class Head(Module):
    """``f_c``: global average pool, optional hidden FC-ReLU layers, classifier."""

    def __init__(self, in_features: int, num_classes: int, hidden: Sequence[int] = (), rng=None):
        super().__init__()
        if num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {num_classes}")
        self.in_features, self.num_classes = in_features, num_classes
        layers = [GlobalAvgPool()]
        c = in_features
        for width in hidden:
            layers += [Linear(c, width, rng=rng), ReLU()]
            c = width
        layers.append(Linear(c, num_classes, rng=rng))
        self.body = Sequential(*layers)

    def forward(self, x, rng=None):
        return self.body(x, rng)
