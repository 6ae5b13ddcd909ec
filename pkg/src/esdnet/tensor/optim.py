"""SGD with momentum and step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from esdnet.errors import ConfigError, UsageError
from esdnet.tensor.tensor import Tensor


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)  # id(param) -> ndarray

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: Iterable[Tensor], state: SgdState, allow_missing: bool = False) -> None:
    """``v <- momentum * v + g;  p <- p - lr * v``, then clear the gradients.

    A parameter without a gradient raises :class:`UsageError` unless
    ``allow_missing`` is set, in which case it is skipped (a branch that did not
    run this step, for instance).
    """
    lr, mu, wd = state.learning_rate, state.momentum, state.weight_decay
    for p in params:
        g = p.grad
        if g is None:
            if allow_missing:
                continue
            raise UsageError(f"parameter {p.name or tuple(p.shape)} has no gradient")
        if wd:
            g = g + wd * p.data
        v = state.velocity.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[id(p)] = v
        v *= mu
        v += g
        p.data -= lr * v
        p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def step_lr(base_lr: float, epoch: int, drop_epochs: Sequence[int], factor: float = 0.1) -> float:
    """Learning rate for ``epoch`` (0-based) under a piecewise-constant schedule."""
    drops = sum(1 for e in drop_epochs if epoch >= e)
    return base_lr * factor**drops
