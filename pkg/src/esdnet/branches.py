"""Multi-branch ensemble topologies over a backbone, and pruning back to the main branch.

Two routings are supported:

* ``v1`` (zigzag): for every split point ``k`` a branch runs the main prefix
  ``f0..fk`` and then the shared sub-blocks ``g_{k+1}..g_m``; each branch has
  its own classifier head.
* ``v2`` (star): every sub-branch ``l_j`` starts from the output of main block
  ``f_i`` and owns all of its blocks and its head.

The main prefix is evaluated once per forward pass and its activations are
reused by every branch that splits off it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from esdnet.errors import ConfigError, TopologyError
from esdnet.nn.attention import AttentionKind, attach_attention, make_attention
from esdnet.nn.backbones import BackboneSpec, build_backbone, build_head, build_stage
from esdnet.nn.blocks import Block, Head
from esdnet.nn.module import Module, ModuleList, Sequential
from esdnet.tensor import Tensor, no_grad, stack_mean

VARIANTS = ("baseline", "v1", "v2")
PLACEMENTS = ("each", "entry")


@dataclass
class TopologyConfig:
    """Declarative branch layout; ``None`` fields resolve to per-backbone defaults.

    ``split_points`` is the list ``sp`` for v1 and a one-element list ``[i]``
    for v2.  ``attention`` holds one kind for v1 (applied to the sub-branch)
    and one kind per sub-branch for v2.
    """

    variant: str = "v1"
    split_points: Optional[List[int]] = None
    attention: Optional[List[str]] = None
    v1_placement: str = "each"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown topology variant {self.variant!r}; expected one of {VARIANTS}")
        if self.v1_placement not in PLACEMENTS:
            raise ConfigError(f"v1_placement must be one of {PLACEMENTS}, got {self.v1_placement!r}")
        if isinstance(self.attention, str):
            self.attention = [self.attention]
        if self.attention is not None:
            for a in self.attention:
                AttentionKind.parse(a)

    def resolved(self, num_blocks: int) -> "TopologyConfig":
        """Fill defaults for a backbone with ``num_blocks`` = m + 1 blocks."""
        m = num_blocks - 1
        sp, att = self.split_points, self.attention
        if self.variant == "baseline":
            sp, att = [], []
        elif self.variant == "v1":
            sp = list(range(m - 1)) if sp is None else list(sp)
            att = ["dropout:0.2"] if att is None else list(att)
            if len(att) != 1:
                raise ConfigError(f"v1 takes exactly one attention kind, got {att}")
        else:
            sp = [max(m - 2, 0)] if sp is None else list(sp)
            att = ["se", "cam", "dropout:0.2"] if att is None else list(att)
            if len(sp) != 1:
                raise ConfigError(f"v2 supports a single split point, got {sp}")
        return TopologyConfig(self.variant, sp, att, self.v1_placement)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "split_points": None if self.split_points is None else list(self.split_points),
            "attention": None if self.attention is None else [str(AttentionKind.parse(a)) for a in self.attention],
            "v1_placement": self.v1_placement,
        }


@dataclass
class Route:
    """One branch: main prefix ``f0..f_split``, then ``suffix`` blocks, then ``head``."""

    split: int
    suffix: List[Module]
    head: Module
    names: List[str] = field(default_factory=list)


@dataclass
class BranchOutputs:
    """Per-branch logits and final (pre-pool) feature maps; index 0 is the main branch."""

    logits: List[Tensor]
    final_maps: List[Tensor]

    @property
    def num_branches(self) -> int:
        return len(self.logits)


def _validate_split_points(sp: Sequence[int], m: int) -> List[int]:
    sp = [int(k) for k in sp]
    for k in sp:
        if not 0 <= k <= m - 1:
            raise TopologyError(f"split point {k} outside [0, {m - 1}]")
    if any(b <= a for a, b in zip(sp, sp[1:])):
        raise TopologyError(f"split points must be strictly increasing, got {sp}")
    return sp


def _main_shapes(main_blocks: Sequence[Block], input_shape) -> List[tuple]:
    shapes, s = [], tuple(input_shape)
    for i, f in enumerate(main_blocks):
        if s[0] != f.in_channels:
            raise TopologyError(f"main block {i} expects {f.in_channels} channels, receives {s[0]}")
        s = tuple(f.output_shape(s))
        shapes.append(s)
    return shapes


def _propagate(blocks: Sequence[Block], s: tuple, where: str) -> tuple:
    for j, b in enumerate(blocks):
        if s[0] != b.in_channels:
            raise TopologyError(f"{where}: block {j} expects {b.in_channels} channels, receives {s[0]}")
        s = tuple(b.output_shape(s))
    return s


class EnsembleModel(Module):
    """Main branch plus weight-sharing sub-branches, evaluated with a memoised trunk."""

    def __init__(self, main_blocks: Sequence[Block], head: Head, input_shape: Tuple[int, int, int]):
        super().__init__()
        self.main = ModuleList(main_blocks)
        self.head = head
        self.input_shape = tuple(input_shape)
        self.variant = "baseline"
        self.spec: Optional[BackboneSpec] = None
        self.topology: Optional[TopologyConfig] = None
        self._shapes = _main_shapes(main_blocks, input_shape)
        m = len(main_blocks) - 1
        main_names = ["conv"] + [f"main-layer{k}" for k in range(1, m + 1)] + ["main-fc"]
        self._routes: List[Route] = [Route(m, [], head, main_names)]

    @property
    def num_branches(self) -> int:
        return len(self._routes)

    @property
    def routes(self) -> List[Route]:
        return list(self._routes)

    @property
    def final_map_shape(self) -> tuple:
        return self._shapes[-1]

    def branch_paths(self) -> List[List[str]]:
        """Block-name sequence of every branch, main first."""
        return [list(r.names) for r in self._routes]

    def forward_all(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> BranchOutputs:
        if x.ndim != 4 or tuple(x.shape[1:2]) != self.input_shape[:1]:
            raise TopologyError(f"input batch {x.shape} does not match model input {self.input_shape}")
        acts = []
        h = x
        for f in self.main:
            h = f(h, rng)
            acts.append(h)
        logits, maps = [], []
        for route in self._routes:
            h = acts[route.split]
            for blk in route.suffix:
                h = blk(h, rng)
            maps.append(h)
            logits.append(route.head(h, rng))
        ref = maps[0].shape[1:]
        for i, fm in enumerate(maps):
            if fm.shape[1:] != ref:
                raise TopologyError(f"branch {i + 1} final map {fm.shape[1:]} differs from main {ref}")
        return BranchOutputs(logits, maps)

    def forward(self, x, rng=None):
        """Main-branch logits only (the inference path)."""
        return self.main_logits(x, rng)

    def main_logits(self, x, rng=None):
        h = x
        for f in self.main:
            h = f(h, rng)
        return self.head(h, rng)

    def describe(self) -> dict:
        return {
            "kind": "ensemble",
            "backbone": self.spec.to_dict() if self.spec else None,
            "topology": self.topology.to_dict() if self.topology else {"variant": self.variant},
        }


class InferenceModel(Module):
    """Stand-alone main branch ``f_c o f_m o ... o f0``."""

    def __init__(self, main_blocks: Sequence[Block], head: Head, spec: Optional[BackboneSpec] = None):
        super().__init__()
        self.main = ModuleList(main_blocks)
        self.head = head
        self.spec = spec

    num_branches = 1

    def branch_paths(self) -> List[List[str]]:
        m = len(self.main) - 1
        return [["conv"] + [f"main-layer{k}" for k in range(1, m + 1)] + ["main-fc"]]

    def forward(self, x, rng=None):
        h = x
        for f in self.main:
            h = f(h, rng)
        return self.head(h, rng)

    def predict_logits(self, x) -> np.ndarray:
        self.eval()
        with no_grad():
            return self.forward(x if isinstance(x, Tensor) else Tensor(x)).data

    def describe(self) -> dict:
        return {"kind": "pruned", "backbone": self.spec.to_dict() if self.spec else None,
                "topology": {"variant": "baseline"}}


def build_baseline(main_blocks: Sequence[Block], head: Head, input_shape) -> EnsembleModel:
    return EnsembleModel(main_blocks, head, input_shape)


def build_v1(
    main_blocks: Sequence[Block],
    head: Head,
    sub_blocks: Sequence[Block],
    sub_heads: Sequence[Head],
    sp: Sequence[int],
    input_shape,
    entry_attention: Optional[Sequence[Optional[Module]]] = None,
) -> EnsembleModel:
    """Zigzag routing: for each ``k`` in ``sp`` a branch ``f_ck g_m .. g_{k+1} f_k .. f_0``.

    ``sub_blocks[j]`` is ``g_{j+1}``, shared by every branch that reaches it.
    ``entry_attention``, when given, holds one module per split point, run once
    where that branch leaves the main trunk.
    """
    m = len(main_blocks) - 1
    if len(sub_blocks) != m:
        raise TopologyError(f"v1 needs {m} sub-blocks for {m + 1} main blocks, got {len(sub_blocks)}")
    sp = _validate_split_points(sp, m)
    if len(sub_heads) != len(sp):
        raise TopologyError(f"v1 needs one head per split point ({len(sp)}), got {len(sub_heads)}")
    if entry_attention is not None and len(entry_attention) != len(sp):
        raise TopologyError("entry_attention must align with the split points")

    model = EnsembleModel(main_blocks, head, input_shape)
    model.variant = "v1"
    model.sub = ModuleList(sub_blocks)
    model.sub_heads = ModuleList(sub_heads)
    if entry_attention is not None:
        model.entry_attention = ModuleList([a for a in entry_attention if a is not None])
    for j, k in enumerate(sp):
        suffix = list(sub_blocks[k:])
        names = ["conv"] + [f"main-layer{i}" for i in range(1, k + 1)]
        sub_names = [f"sub-layer{i}" for i in range(k + 1, m + 1)]
        if entry_attention is not None and entry_attention[j] is not None:
            suffix.insert(0, entry_attention[j])
            sub_names.insert(0, f"attention{j + 1}")
        s = _propagate(sub_blocks[k:], model._shapes[k], f"v1 branch at split {k}")
        if s != model.final_map_shape:
            raise TopologyError(f"v1 branch at split {k} ends with map {s}, main ends with {model.final_map_shape}")
        if sub_heads[j].in_features != s[0]:
            raise TopologyError(f"sub-head {j + 1} takes {sub_heads[j].in_features} features, branch yields {s[0]}")
        model._routes.append(Route(k, suffix, sub_heads[j], names + sub_names + [f"sub-fc{j + 1}"]))
    return model


def build_v2(
    main_blocks: Sequence[Block],
    head: Head,
    branch_defs: Sequence[Tuple[Sequence[Block], Head]],
    split_point: int,
    input_shape,
) -> EnsembleModel:
    """Star routing: every sub-branch ``f_ck l_k f_i .. f_0`` with private blocks and head."""
    m = len(main_blocks) - 1
    (i,) = _validate_split_points([split_point], m)
    model = EnsembleModel(main_blocks, head, input_shape)
    model.variant = "v2"
    model.branches = ModuleList()
    model.branch_heads = ModuleList()
    for j, (blocks, bhead) in enumerate(branch_defs, start=1):
        blocks = list(blocks)
        if not blocks:
            raise TopologyError(f"v2 sub-branch {j} has no blocks")
        s = _propagate(blocks, model._shapes[i], f"v2 sub-branch {j}")
        if s != model.final_map_shape:
            raise TopologyError(f"v2 sub-branch {j} ends with map {s}, main ends with {model.final_map_shape}")
        if bhead.in_features != s[0]:
            raise TopologyError(f"v2 head {j} takes {bhead.in_features} features, branch yields {s[0]}")
        body = Sequential(*blocks)
        model.branches.append(body)
        model.branch_heads.append(bhead)
        names = ["conv"] + [f"main-layer{k}" for k in range(1, i + 1)]
        names += [f"sub{j}-layer{k}" for k in range(i + 1, i + 1 + len(blocks))] + [f"sub{j}-fc"]
        model._routes.append(Route(i, [body], bhead, names))
    return model


def _label_attention(names: List[str], kind: AttentionKind, prefix: str, each: bool) -> List[str]:
    if kind.kind == "none":
        return names
    tag = f"[{kind}]"
    first = True
    out = []
    for n in names:
        if n.startswith(prefix) and not n.endswith("fc") and (each or first):
            n = n + tag
            first = False
        out.append(n)
    return out


def build_ensemble(
    spec: BackboneSpec,
    topology: TopologyConfig,
    rng: np.random.Generator,
) -> EnsembleModel:
    """Build a randomly initialised ensemble for ``spec`` and ``topology``.

    The main branch draws from ``rng`` first, in the same order as
    :func:`build_backbone`, so a baseline ensemble matches a plain backbone
    built from the same seed.
    """
    topo = topology.resolved(spec.num_blocks)
    main_blocks, head = build_backbone(spec, rng)
    input_shape = (spec.in_channels, spec.image_size, spec.image_size)
    m = spec.num_blocks - 1
    channels = [b.out_channels for b in main_blocks]

    if topo.variant == "baseline":
        model = build_baseline(main_blocks, head, input_shape)
    elif topo.variant == "v1":
        kind = AttentionKind.parse(topo.attention[0])
        sub_blocks = []
        for k in range(1, m + 1):
            g = build_stage(spec, k - 1, channels[k - 1], rng)
            if topo.v1_placement == "each":
                g = attach_attention(g, kind, rng)
            sub_blocks.append(g)
        sp = _validate_split_points(topo.split_points, m)
        sub_heads = [build_head(spec, channels[-1], rng) for _ in sp]
        entry = None
        if topo.v1_placement == "entry":
            entry = [make_attention(kind, channels[k], rng) for k in sp]
        model = build_v1(main_blocks, head, sub_blocks, sub_heads, sp, input_shape, entry)
        for r in model._routes[1:]:
            r.names = _label_attention(r.names, kind, "sub-layer", topo.v1_placement == "each")
    else:
        (i,) = _validate_split_points(topo.split_points, m)
        defs, kinds = [], [AttentionKind.parse(a) for a in topo.attention]
        for kind in kinds:
            blocks, c = [], channels[i]
            for k in range(i + 1, m + 1):
                blk = build_stage(spec, k - 1, c, rng)
                c = blk.out_channels
                blocks.append(blk)
            blocks[0] = attach_attention(blocks[0], kind, rng)
            defs.append((blocks, build_head(spec, c, rng)))
        model = build_v2(main_blocks, head, defs, i, input_shape)
        for j, (r, kind) in enumerate(zip(model._routes[1:], kinds), start=1):
            r.names = _label_attention(r.names, kind, f"sub{j}-layer", each=False)
    model.spec = spec
    model.topology = topo
    return model


def forward_all(model: EnsembleModel, x: Tensor, mode: str = "eval", rng=None) -> BranchOutputs:
    """Set ``mode`` (``train`` or ``eval``) and evaluate every branch."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model.forward_all(x, rng)


def ensemble_logits(outputs: BranchOutputs) -> Tensor:
    """Per-class arithmetic mean of all branch logits."""
    return stack_mean(outputs.logits)


def prune_to_main(model) -> InferenceModel:
    """Keep ``f0..fm`` and ``f_c`` only.  The returned model shares the parameter objects."""
    if isinstance(model, InferenceModel):
        return model
    return InferenceModel(list(model.main), model.head, model.spec)
