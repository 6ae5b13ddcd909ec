"""Declarative backbone specs and presets.

A backbone is split into blocks ``[f0, f1, ..., fm]`` (``conv``, ``layer1`` ..
``layerm``) plus a head ``f_c`` (average pool and FC), the granularity at which
branches split off.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import List, Tuple

import numpy as np

from esdnet.errors import ConfigError
from esdnet.nn.blocks import BasicBlock, Block, Bottleneck, DenseStage, Head, Stage, Stem, VggStage

BLOCK_KINDS = ("basic", "bottleneck", "dense", "vgg")


@dataclass(frozen=True)
class StageSpec:
    blocks: int
    channels: int
    stride: int = 1


@dataclass(frozen=True)
class BackboneSpec:
    """Stem, ordered stages and head of a baseline classifier.

    For ``dense`` backbones ``channels`` is the stage's output width and a
    stride of 2 means a halving transition precedes the dense block.  For
    ``vgg`` a stride of 2 means a 2x2 max pool precedes the convolutions.
    """

    name: str
    block: str
    stem_channels: int
    stages: Tuple[StageSpec, ...]
    num_classes: int = 10
    in_channels: int = 3
    image_size: int = 32
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_convs: int = 1
    stem_pool: int = 0
    growth_rate: int = 32
    bn_size: int = 4
    fc_hidden: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(s if isinstance(s, StageSpec) else StageSpec(*s) for s in self.stages))
        object.__setattr__(self, "fc_hidden", tuple(self.fc_hidden))
        if self.block not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.block!r}; expected one of {BLOCK_KINDS}")
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        for i, s in enumerate(self.stages):
            if s.blocks < 1 or s.channels < 1 or s.stride not in (1, 2):
                raise ConfigError(f"stage {i + 1}: invalid spec {s}")
        if self.stem_channels < 1 or self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("stem channels, num_classes and in_channels must be positive")

    @property
    def num_blocks(self) -> int:
        """``m + 1``: stem plus one block per stage."""
        return 1 + len(self.stages)

    def with_classes(self, num_classes: int) -> "BackboneSpec":
        return replace(self, num_classes=num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(asdict(s).values()) for s in self.stages]
        d["fc_hidden"] = list(self.fc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        d = dict(d)
        d["stages"] = tuple(StageSpec(*s) for s in d["stages"])
        d["fc_hidden"] = tuple(d.get("fc_hidden", ()))
        return cls(**d)


def _resnet_cifar(depth: int) -> BackboneSpec:
    n = (depth - 2) // 6
    return BackboneSpec(
        name=f"resnet{depth}",
        block="basic",
        stem_channels=16,
        stages=(StageSpec(n, 16, 1), StageSpec(n, 32, 2), StageSpec(n, 64, 2)),
    )


def _resnet_wide(name: str, counts) -> BackboneSpec:
    widths = (64, 128, 256, 512)
    return BackboneSpec(
        name=name,
        block="basic",
        stem_channels=64,
        stages=tuple(StageSpec(c, w, 1 if i == 0 else 2) for i, (c, w) in enumerate(zip(counts, widths))),
    )


PRESETS = {
    "tiny": BackboneSpec(
        name="tiny", block="basic", stem_channels=8, stages=(StageSpec(1, 8, 1), StageSpec(1, 16, 2))
    ),
    "resnet20": _resnet_cifar(20),
    "resnet32": _resnet_cifar(32),
    "resnet44": _resnet_cifar(44),
    "resnet56": _resnet_cifar(56),
    "resnet18": _resnet_wide("resnet18", (2, 2, 2, 2)),
    "resnet34": _resnet_wide("resnet34", (3, 4, 6, 3)),
    "resnet50": BackboneSpec(
        name="resnet50",
        block="bottleneck",
        stem_channels=64,
        stem_kernel=7,
        stem_stride=2,
        stem_pool=3,
        image_size=224,
        num_classes=1000,
        stages=(StageSpec(3, 256, 1), StageSpec(4, 512, 2), StageSpec(6, 1024, 2), StageSpec(3, 2048, 2)),
    ),
    "densenet121": BackboneSpec(
        name="densenet121",
        block="dense",
        stem_channels=64,
        stem_kernel=7,
        stem_stride=2,
        stem_pool=3,
        image_size=224,
        num_classes=1000,
        stages=(StageSpec(6, 256, 1), StageSpec(12, 512, 2), StageSpec(24, 1024, 2), StageSpec(16, 1024, 2)),
    ),
    "vgg16": BackboneSpec(
        name="vgg16",
        block="vgg",
        stem_channels=64,
        stem_convs=2,
        stem_pool=2,
        image_size=224,
        num_classes=1000,
        fc_hidden=(512, 512),
        stages=(StageSpec(2, 128, 1), StageSpec(3, 256, 2), StageSpec(3, 512, 2), StageSpec(3, 512, 2)),
    ),
}


def get_preset(name: str, num_classes: int | None = None) -> BackboneSpec:
    try:
        spec = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; available: {sorted(PRESETS)}") from None
    return spec if num_classes is None else spec.with_classes(num_classes)


def build_stem(spec: BackboneSpec, rng) -> Stem:
    return Stem(
        spec.in_channels,
        spec.stem_channels,
        kernel=spec.stem_kernel,
        stride=spec.stem_stride,
        convs=spec.stem_convs,
        norm=spec.block != "vgg",
        pool=spec.stem_pool,
        rng=rng,
    )


def build_stage(spec: BackboneSpec, index: int, in_channels: int, rng) -> Block:
    """Build ``layer{index + 1}`` taking ``in_channels`` input channels."""
    st = spec.stages[index]
    last = index == len(spec.stages) - 1
    if spec.block == "basic":
        return Stage([BasicBlock(in_channels if i == 0 else st.channels, st.channels, st.stride if i == 0 else 1, rng=rng)
                      for i in range(st.blocks)])
    if spec.block == "bottleneck":
        return Stage([Bottleneck(in_channels if i == 0 else st.channels, st.channels, st.stride if i == 0 else 1, rng=rng)
                      for i in range(st.blocks)])
    if spec.block == "dense":
        stage = DenseStage(in_channels, st.blocks, spec.growth_rate, spec.bn_size,
                           transition=st.stride == 2, final_norm=last, rng=rng)
        if stage.out_channels != st.channels:
            raise ConfigError(f"dense stage {index + 1} produces {stage.out_channels} channels, spec says {st.channels}")
        return stage
    return VggStage(in_channels, st.channels, st.blocks, pool=st.stride == 2, rng=rng)


def build_backbone(spec: BackboneSpec, rng: np.random.Generator) -> Tuple[List[Block], Head]:
    """Return ``([f0, ..., fm], f_c)`` whose composition is the baseline classifier."""
    blocks: List[Block] = [build_stem(spec, rng)]
    c = spec.stem_channels
    for i in range(len(spec.stages)):
        stage = build_stage(spec, i, c, rng)
        blocks.append(stage)
        c = stage.out_channels
    head = build_head(spec, c, rng)
    return blocks, head


def build_head(spec: BackboneSpec, in_features: int, rng) -> Head:
    return Head(in_features, spec.num_classes, spec.fc_hidden, rng=rng)


def block_names(spec_or_count) -> List[str]:
    m = spec_or_count.num_blocks - 1 if isinstance(spec_or_count, BackboneSpec) else int(spec_or_count) - 1
    return ["conv"] + [f"layer{k}" for k in range(1, m + 1)]
