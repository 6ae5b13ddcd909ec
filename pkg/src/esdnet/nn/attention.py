"""Attention modules that diversify sub-branches: SE, channel attention (CAM) and dropout."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from esdnet.errors import ConfigError
from esdnet.nn.blocks import Block
from esdnet.nn.layers import Dropout, Linear
from esdnet.nn.module import Module, Parameter
from esdnet.tensor import Tensor, global_avg_pool, matmul, relu, reshape, sigmoid, softmax, transpose

KINDS = ("none", "se", "cam", "dropout")


@dataclass(frozen=True)
class AttentionKind:
    """Which attention module precedes a sub-branch block.

    Parsed from strings such as ``"none"``, ``"se"``, ``"se:8"``, ``"cam"``,
    ``"dropout"`` or ``"dropout:0.3"``.
    """

    kind: str = "none"
    reduction: int = 4
    p: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "se" and self.reduction < 1:
            raise ConfigError(f"SE reduction must be positive, got {self.reduction}")
        if self.kind == "dropout" and not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {self.p}")

    @classmethod
    def parse(cls, text) -> "AttentionKind":
        if isinstance(text, AttentionKind):
            return text
        if text is None:
            return cls("none")
        name, _, arg = str(text).strip().lower().partition(":")
        try:
            if name == "se":
                return cls("se", reduction=int(arg) if arg else 4)
            if name == "dropout":
                return cls("dropout", p=float(arg) if arg else 0.2)
        except ValueError:
            raise ConfigError(f"bad attention argument in {text!r}") from None
        if arg:
            raise ConfigError(f"attention kind {name!r} takes no argument, got {text!r}")
        return cls(name)

    def __str__(self):
        if self.kind == "se":
            return f"se:{self.reduction}"
        if self.kind == "dropout":
            return f"dropout:{self.p:g}"
        return self.kind


class SEModule(Module):
    """Squeeze-and-excitation gate: ``x * sigmoid(W2 relu(W1 GAP(x)))`` per channel."""

    def __init__(self, channels: int, reduction: int = 4, rng=None):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"SE reduction {reduction} does not divide channel count {channels}")
        hidden = channels // reduction
        self.channels = channels
        self.fc1 = Linear(channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, channels, rng=rng)

    def gate(self, x: Tensor) -> Tensor:
        s = global_avg_pool(x)
        return sigmoid(self.fc2(relu(self.fc1(s))))

    def forward(self, x, rng=None):
        n, c = x.shape[:2]
        return x * reshape(self.gate(x), (n, c, 1, 1))


class CAMModule(Module):
    """Channel attention in the DANet form, with residual scale ``gamma`` starting at 0.

    For each sample, with ``A`` the C x HW reshaped map::

        energy    = A A^T
        attention = softmax_rows(rowmax(energy) - energy)
        out       = gamma * (attention A) + x
    """

    def __init__(self):
        super().__init__()
        self.gamma = Parameter(np.zeros(1))

    def forward(self, x, rng=None):
        n, c, h, w = x.shape
        a = reshape(x, (n, c, h * w))
        energy = matmul(a, transpose(a, (0, 2, 1)))
        attention = softmax(energy.max(axis=-1, keepdims=True) - energy, axis=-1)
        out = reshape(matmul(attention, a), (n, c, h, w))
        return self.gamma * out + x


def make_attention(kind: AttentionKind, channels: int, rng=None) -> Optional[Module]:
    kind = AttentionKind.parse(kind)
    if kind.kind == "se":
        return SEModule(channels, kind.reduction, rng=rng)
    if kind.kind == "cam":
        return CAMModule()
    if kind.kind == "dropout":
        return Dropout(kind.p)
    return None


class Attended(Block):
    """Applies a fresh attention module to the input, then the wrapped block."""

    def __init__(self, attention: Module, block: Block):
        super().__init__()
        self.attention = attention
        self.block = block
        self.in_channels, self.out_channels = block.in_channels, block.out_channels

    def forward(self, x, rng=None):
        return self.block(self.attention(x, rng), rng)

    def output_shape(self, shape):
        return self.block.output_shape(shape)


def attach_attention(block: Block, kind, rng=None) -> Block:
    """Wrap ``block`` so that the attention of ``kind`` runs in front of it.

    ``kind`` none returns ``block`` itself.
    """
    module = make_attention(AttentionKind.parse(kind), block.in_channels, rng=rng)
    if module is None:
        return block
    return Attended(module, block)
