from esdnet.nn.attention import Attended, AttentionKind, CAMModule, SEModule, attach_attention, make_attention
from esdnet.nn.backbones import PRESETS, BackboneSpec, StageSpec, build_backbone, build_head, build_stage, get_preset
from esdnet.nn.blocks import BasicBlock, Block, Bottleneck, DenseStage, Head, Stage, Stem, VggStage
from esdnet.nn.layers import BatchNorm2d, Conv2d, Dropout, GlobalAvgPool, Identity, Linear, ReLU
from esdnet.nn.module import Module, ModuleList, Parameter, Sequential

__all__ = [
    "Attended", "AttentionKind", "BackboneSpec", "BasicBlock", "BatchNorm2d", "Block", "Bottleneck",
    "CAMModule", "Conv2d", "DenseStage", "Dropout", "GlobalAvgPool", "Head", "Identity", "Linear",
    "Module", "ModuleList", "PRESETS", "Parameter", "ReLU", "SEModule", "Sequential", "Stage",
    "StageSpec", "Stem", "VggStage", "attach_attention", "build_backbone", "build_head",
    "build_stage", "get_preset", "make_attention",
]
