"""Static parameter and FLOP accounting for ensembles and pruned models.

FLOPs count one multiply-accumulate as 2 operations for convolution, linear
and matmul ops (plus one per bias add); elementwise ops are not counted.
Shared blocks count once towards parameters but once per execution towards
FLOPs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from esdnet.branches import EnsembleModel, InferenceModel, prune_to_main
from esdnet.tensor import Tensor, no_grad, profile


@dataclass
class CostReport:
    params: int
    flops: Optional[int] = None
    branch_params: List[int] = field(default_factory=list)
    branch_flops: List[int] = field(default_factory=list)

    @property
    def macs(self) -> Optional[int]:
        return None if self.flops is None else self.flops // 2


def _unique_params(modules) -> int:
    seen, total = set(), 0
    for mod in modules:
        for _, p in mod.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.size
    return int(total)


def count_params(model) -> int:
    return model.num_parameters()


def _route_modules(model: EnsembleModel, j: int) -> list:
    route = model.routes[j]
    return list(model.main)[: route.split + 1] + list(route.suffix) + [route.head]


def branch_params(model) -> List[int]:
    if isinstance(model, InferenceModel):
        return [model.num_parameters()]
    return [_unique_params(_route_modules(model, j)) for j in range(model.num_branches)]


def count_flops(model, input_shape: Optional[Sequence[int]] = None, batch: int = 1) -> int:
    """FLOPs of one eval-mode forward pass over ``batch`` inputs (all branches for an ensemble)."""
    shape = tuple(input_shape) if input_shape is not None else _default_input(model)
    x = Tensor(np.zeros((batch, *shape), dtype=np.float32))
    model.eval()
    with no_grad(), profile() as prof:
        if isinstance(model, EnsembleModel):
            model.forward_all(x)
        else:
            model(x)
    return prof.total_flops


def _default_input(model) -> tuple:
    spec = model.spec
    if spec is None:
        raise ValueError("input_shape is required for a model without a backbone spec")
    return spec.in_channels, spec.image_size, spec.image_size


def _branch_flops(model: EnsembleModel, shape, batch: int) -> List[int]:
    x = Tensor(np.zeros((batch, *shape), dtype=np.float32))
    model.eval()
    out = []
    with no_grad():
        for route in model.routes:
            with profile() as prof:
                h = x
                for f in list(model.main)[: route.split + 1]:
                    h = f(h)
                for blk in route.suffix:
                    h = blk(h)
                route.head(h)
            out.append(prof.total_flops)
    return out


def cost_report(model, input_shape: Optional[Sequence[int]] = None, with_flops: bool = True,
                per_branch: bool = False) -> CostReport:
    shape = tuple(input_shape) if input_shape is not None else _default_input(model)
    report = CostReport(count_params(model), branch_params=branch_params(model))
    if with_flops:
        report.flops = count_flops(model, shape)
        if per_branch and isinstance(model, EnsembleModel):
            report.branch_flops = _branch_flops(model, shape, 1)
    return report


def compare(model, input_shape=None, with_flops: bool = True) -> dict:
    """Cost of the full ensemble next to its pruned main branch."""
    return {
        "ensemble": cost_report(model, input_shape, with_flops, per_branch=with_flops),
        "pruned": cost_report(prune_to_main(model), input_shape, with_flops),
    }
