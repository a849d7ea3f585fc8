"""Full segmentation network and deterministic construction."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from ..config import ModelConfig
from ..errors import ShapeError
from .decoder import Decoder, SkipPyramid
from .swin import PatchEmbed, Stem, WindowAttention, WindowStage


def trunc_normal_(tensor: torch.Tensor, std: float,
                  generator: torch.Generator) -> None:
    """In-place truncated normal on [-2, 2] driven by an explicit generator."""
    lo = (1.0 + math.erf(-2.0 / std / math.sqrt(2.0))) / 2.0
    hi = (1.0 + math.erf(2.0 / std / math.sqrt(2.0))) / 2.0
    with torch.no_grad():
        tensor.uniform_(2 * lo - 1, 2 * hi - 1, generator=generator)
        tensor.erfinv_()
        tensor.mul_(std * math.sqrt(2.0))
        tensor.clamp_(min=-2.0, max=2.0)


def _kaiming_conv_(weight: torch.Tensor, generator: torch.Generator) -> None:
    fan_out = weight.shape[0] * weight.shape[2] * weight.shape[3]
    std = math.sqrt(2.0 / fan_out)
    with torch.no_grad():
        weight.normal_(0.0, std, generator=generator)


def initialize_parameters(model: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize every parameter from ``seed``.

    Iterates modules in construction order with a single generator, so the
    same (architecture, seed) pair always yields bit-identical parameters.
    """
    g = torch.Generator(device="cpu").manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    for module in model.modules():
        if isinstance(module, nn.Linear):
            trunc_normal_(module.weight, 0.02, g)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Conv2d):
            _kaiming_conv_(module.weight, g)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, (nn.LayerNorm, nn.InstanceNorm2d)):
            if module.weight is not None:
                nn.init.ones_(module.weight)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        if isinstance(module, WindowAttention):
            trunc_normal_(module.relative_position_bias_table, 0.02, g)
    # residual attention scales start at zero (identity blocks)
    for name, param in model.named_parameters():
        if name.endswith("gamma"):
            nn.init.zeros_(param)


class Encoder(nn.Module):
    """Five-stage encoder: conv stem, patch embedding, four window stages."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        dims = config.stage_dims
        self.stem = Stem(config.in_channels, dims[0], config.stem_kernel,
                         config.stem_stride, config.stem_padding)
        self.patch_embed = PatchEmbed(dims[0], dims[1], config.patch_size)
        self.stages = nn.ModuleList(
            WindowStage(
                dim=dims[i + 1],
                depth=config.stage_blocks[i],
                num_heads=config.num_heads[i],
                window=config.window_size,
                mlp_ratio=config.mlp_ratio,
                downsample=(i > 0),
            )
            for i in range(4)
        )

    def forward(self, x: torch.Tensor) -> SkipPyramid:
        levels = [self.stem(x)]
        levels.append(self.stages[0](self.patch_embed(levels[0])))
        for stage in self.stages[1:]:
            levels.append(stage(levels[-1]))
        return SkipPyramid(levels)


class SegmentationModel(nn.Module):
    """Maps an RGB batch to per-pixel tumor logits at input resolution."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    @property
    def total_stride(self) -> int:
        return self.config.total_stride

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4:
            raise ShapeError(
                f"expected (B, C, H, W) input, got shape {tuple(images.shape)}"
            )
        stride = self.total_stride
        h, w = images.shape[-2:]
        if h % stride or w % stride:
            raise ShapeError(
                f"input spatial dims {h}x{w} must be divisible by {stride}; "
                f"pad the image before calling the model"
            )
        return self.decoder(self.encoder(images))


def build_model(config: ModelConfig, seed: int) -> SegmentationModel:
    """Construct the network and give it a deterministic initialization."""
    config.validate()
    model = SegmentationModel(config)
    initialize_parameters(model, seed)
    return model
