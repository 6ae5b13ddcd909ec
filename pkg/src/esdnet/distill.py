"""Self-distillation objective: per-branch CE, ensemble-logit KL and ensemble-map MSE.

The ensemble of all branches acts as teacher for the main branch.  Teachers
are detached from the tape unless ``detach_teacher`` is turned off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from esdnet.branches import BranchOutputs
from esdnet.errors import ConfigError, DataError, DimensionError
from esdnet.tensor import Tensor, log_softmax, softmax, sqrt, stack_mean
from esdnet.tensor import log as tlog

KL_EPS = 1e-12
NORM_EPS = 1e-6


@dataclass
class LossWeights:
    """``alpha`` (one per branch CE), ``beta`` (KL) and ``lam`` (feature MSE)."""

    alpha: Optional[List[float]] = None
    beta: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.alpha is not None:
            self.alpha = [float(a) for a in self.alpha]
            if any(a < 0 for a in self.alpha):
                raise ConfigError(f"alpha weights must be non-negative, got {self.alpha}")
        if self.beta < 0 or self.lam < 0:
            raise ConfigError(f"beta and lam must be non-negative, got {self.beta}, {self.lam}")

    def alphas(self, num_branches: int) -> List[float]:
        if self.alpha is None:
            return [1.0] * num_branches
        if len(self.alpha) != num_branches:
            raise ConfigError(f"alpha has {len(self.alpha)} entries for {num_branches} branches")
        return list(self.alpha)


@dataclass
class LossBundle:
    ce_per_branch: List[Tensor]
    kl: Tensor
    mse: Tensor
    total: Tensor
    batch_size: int
    weights: List[float] = field(default_factory=list)

    def parts(self) -> dict:
        return {
            "ce": [float(c.item()) for c in self.ce_per_branch],
            "ce_sum": float(sum(c.item() for c in self.ce_per_branch)),
            "kl": float(self.kl.item()),
            "mse": float(self.mse.item()),
            "total": float(self.total.item()),
        }


def softmax_probs(logits) -> np.ndarray:
    """Max-shifted softmax over the last axis (plain array in, plain array out)."""
    v = np.asarray(logits, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def kl_distill_logits(branch_logits: Sequence[Tensor], main_logits: Tensor, detach_teacher: bool = True) -> Tensor:
    """Batch mean of ``sum_c p_e log(p_e / p_m)``.

    ``p_e`` is the softmax of the mean over all branch logits, ``p_m`` the
    softmax of the main logits.
    """
    branch_logits = [_as_t(v) for v in branch_logits]
    main_logits = _as_t(main_logits)
    teacher = stack_mean(branch_logits)
    if detach_teacher:
        teacher = teacher.detach()
    p_e = softmax(teacher, axis=-1)
    log_p_e = tlog(p_e + KL_EPS)
    log_p_m = log_softmax(main_logits, axis=-1)
    per_sample = (p_e * (log_p_e - log_p_m)).sum(axis=-1)
    return per_sample.mean()


def channel_sum(feature_map: Tensor) -> Tensor:
    """N x C x H x W -> N x H x W, summing over channels."""
    feature_map = _as_t(feature_map)
    if feature_map.ndim != 4:
        raise DimensionError(f"channel_sum: expected N x C x H x W, got {feature_map.shape}")
    return feature_map.sum(axis=1)


def normalize_map(g: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample standardisation over H*W with the population std.

    ``F = (g - mean) / (std + eps)``; a constant map becomes all zeros.
    """
    g = _as_t(g)
    if g.ndim != 3:
        raise DimensionError(f"normalize_map: expected N x H x W, got {g.shape}")
    centred = g - g.mean(axis=(1, 2), keepdims=True)
    std = sqrt((centred * centred).mean(axis=(1, 2), keepdims=True))
    return centred / (std + eps)


def ensemble_feature_map(maps: Sequence[Tensor], detach_teacher: bool = True) -> Tensor:
    """Elementwise mean over all branches' normalised maps (main included)."""
    maps = [_as_t(m) for m in maps]
    for m in maps[1:]:
        if m.shape != maps[0].shape:
            raise DimensionError(f"ensemble_feature_map: shape {m.shape} differs from {maps[0].shape}")
    out = stack_mean(maps)
    return out.detach() if detach_teacher else out


def mse_feature_loss(f_e: Tensor, f_m: Tensor, batch_size: Optional[int] = None) -> Tensor:
    """``(1/T) sum_t sum_ij (F_e - F_m)^2``; no spatial averaging."""
    f_e, f_m = _as_t(f_e), _as_t(f_m)
    if f_e.shape != f_m.shape:
        raise DimensionError(f"mse_feature_loss: teacher {f_e.shape} vs student {f_m.shape}")
    t = f_m.shape[0] if batch_size is None else batch_size
    diff = f_e - f_m
    return (diff * diff).sum() * (1.0 / t)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    logits = _as_t(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, m = logits.shape
    if labels.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} logit rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise DataError(f"cross_entropy: labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, m), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return -(log_softmax(logits, axis=-1) * Tensor(onehot, dtype=logits.dtype)).sum() * (1.0 / n)


def _zero(dtype) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype), dtype=dtype)


def total_loss(
    outputs: BranchOutputs,
    labels,
    weights: Optional[LossWeights] = None,
    detach_teacher: bool = True,
) -> LossBundle:
    """Assemble ``sum alpha_i CE_i + beta KL + lam MSE``.

    A term whose weight is 0 is still reported but left out of the total, and
    a single-branch model reports KL = MSE = 0, so a one-branch run with
    ``beta = lam = 0`` backpropagates exactly like plain cross-entropy training.
    """
    weights = weights or LossWeights()
    n_br = outputs.num_branches
    if n_br < 1:
        raise ConfigError("total_loss needs at least one branch")
    alphas = weights.alphas(n_br)
    ces = [cross_entropy(v, labels) for v in outputs.logits]
    dtype = outputs.logits[0].dtype
    batch = outputs.logits[0].shape[0]

    if n_br > 1:
        kl = kl_distill_logits(outputs.logits, outputs.logits[0], detach_teacher)
        normed = [normalize_map(channel_sum(fm)) for fm in outputs.final_maps]
        f_e = ensemble_feature_map(normed, detach_teacher)
        mse = mse_feature_loss(f_e, normed[0], batch)
    else:
        kl, mse = _zero(dtype), _zero(dtype)

    total = None
    for a, ce in zip(alphas, ces):
        if a == 0:
            continue
        total = ce * a if total is None else total + ce * a
    for w, term in ((weights.beta, kl), (weights.lam, mse)):
        if w == 0 or n_br == 1:
            continue
        total = total + term * w if total is not None else term * w
    if total is None:
        total = _zero(dtype)
    return LossBundle(ces, kl, mse, total, batch, alphas)


def first_nonfinite(bundle: LossBundle) -> Optional[str]:
    """Name of the first loss part that is NaN/inf, or ``None``."""
    for i, ce in enumerate(bundle.ce_per_branch, start=1):
        if not math.isfinite(ce.item()):
            return f"ce_{i}"
    for name in ("kl", "mse", "total"):
        if not math.isfinite(getattr(bundle, name).item()):
            return name
    return None
