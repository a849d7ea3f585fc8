"""Decoder: position attention at the bottleneck, then four fusion steps.

Each step doubles the spatial resolution, fuses with the matching encoder
skip through MultiScaleFusion, and refines with two 3x3 conv blocks. A last
upsample plus 1x1 convolution produces per-pixel logits at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import ModelConfig
from ..errors import ShapeError
from .attention import MultiScaleFusion, PositionAttention


@dataclass
class SkipPyramid:
    """Encoder outputs, shallowest first: stage s at 1/2^s input resolution."""

    levels: list[torch.Tensor]

    def validate(self, stage_dims: list[int]) -> None:
        if len(self.levels) != len(stage_dims):
            raise ShapeError(
                f"pyramid has {len(self.levels)} levels, expected {len(stage_dims)}"
            )
        for i, (fm, dim) in enumerate(zip(self.levels, stage_dims)):
            if fm.shape[1] != dim:
                raise ShapeError(
                    f"pyramid level {i + 1} has {fm.shape[1]} channels, expected {dim}"
                )
            if i > 0:
                prev = self.levels[i - 1]
                if (prev.shape[-2] != 2 * fm.shape[-2]
                        or prev.shape[-1] != 2 * fm.shape[-1]):
                    raise ShapeError(
                        f"pyramid level {i + 1} spatial {tuple(fm.shape[-2:])} is "
                        f"not half of level {i} {tuple(prev.shape[-2:])}"
                    )


class ConvBlock(nn.Module):
    """3x3 convolution + instance norm + GELU, batch-size independent."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.norm = nn.InstanceNorm2d(out_channels, affine=True)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.conv(x)))


class DecoderStage(nn.Module):
    def __init__(self, high_channels: int, skip_channels: int):
        super().__init__()
        self.fuse = MultiScaleFusion(skip_channels, high_channels, skip_channels)
        self.refine = nn.Sequential(
            ConvBlock(skip_channels, skip_channels),
            ConvBlock(skip_channels, skip_channels),
        )

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear",
                          align_corners=False)
        return self.refine(self.fuse(skip, x))


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        dims = config.stage_dims
        self.stage_dims = list(dims)
        self.position_attn = PositionAttention(dims[4])
        # decoder levels mirror the encoder: [384, 192, 96, 48] by default
        self.stages = nn.ModuleList(
            DecoderStage(high_channels=dims[i + 1], skip_channels=dims[i])
            for i in reversed(range(4))
        )
        self.head = nn.Conv2d(dims[0], config.out_channels, kernel_size=1)

    def forward(self, pyramid: SkipPyramid) -> torch.Tensor:
        pyramid.validate(self.stage_dims)
        x = self.position_attn(pyramid.levels[4])
        for stage, skip in zip(self.stages, reversed(pyramid.levels[:4])):
            x = stage(x, skip)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.head(x)
