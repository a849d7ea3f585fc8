from .attention import ChannelGate, MultiScaleFusion, PositionAttention
from .decoder import ConvBlock, Decoder, SkipPyramid
from .network import Encoder, SegmentationModel, build_model, initialize_parameters
from .swin import (
    PatchEmbed,
    PatchMerging,
    Stem,
    SwinBlock,
    WindowAttention,
    WindowStage,
    window_partition,
    window_reverse,
)

__all__ = [
    "ChannelGate",
    "ConvBlock",
    "Decoder",
    "Encoder",
    "MultiScaleFusion",
    "PatchEmbed",
    "PatchMerging",
    "PositionAttention",
    "SegmentationModel",
    "SkipPyramid",
    "Stem",
    "SwinBlock",
    "WindowAttention",
    "WindowStage",
    "build_model",
    "initialize_parameters",
    "window_partition",
    "window_reverse",
]
