"""Cross-attention modules applied around the decoder.

PositionAttention relates every pixel of a map to every other pixel through
a full (HW x HW) affinity matrix; MultiScaleFusion merges a low-level skip
map with an upsampled high-level map after gating each by its own
squeeze-excitation channel attention.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError


class PositionAttention(nn.Module):
    """Global spatial self-attention added residually with a learned scale.

    The output is ``x + gamma * (affinity @ value)`` where the affinity is a
    row-softmax over all pixel positions. ``gamma`` starts at zero so the
    block is the identity at initialization.
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        inner = max(1, channels // reduction)
        self.query = nn.Conv2d(channels, inner, kernel_size=1)
        self.key = nn.Conv2d(channels, inner, kernel_size=1)
        self.value = nn.Conv2d(channels, channels, kernel_size=1)
        self.gamma = nn.Parameter(torch.zeros(1))

    def affinity(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, HW, HW) matrix of pairwise position weights."""
        q = self.query(x).flatten(2).permute(0, 2, 1)  # B, HW, C'
        k = self.key(x).flatten(2)  # B, C', HW
        return torch.bmm(q, k).softmax(dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        attn = self.affinity(x)
        v = self.value(x).flatten(2)  # B, C, HW
        out = torch.bmm(v, attn.permute(0, 2, 1)).view(b, c, h, w)
        return x + self.gamma * out


class ChannelGate(nn.Module):
    """Squeeze-excitation gate: global pool -> bottleneck MLP -> sigmoid.

    The bottleneck uses the same smooth activation family as the rest of
    the network, which keeps the whole model differentiable everywhere.
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        inner = max(1, channels // reduction)
        self.fc1 = nn.Conv2d(channels, inner, kernel_size=1)
        self.fc2 = nn.Conv2d(inner, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g = F.adaptive_avg_pool2d(x, 1)
        g = self.fc2(F.gelu(self.fc1(g)))
        return torch.sigmoid(g)  # B, C, 1, 1


class MultiScaleFusion(nn.Module):
    """Channel-gated fusion of a low-level skip with a high-level map.

    Each input is rescaled by its own channel gate; the gated maps are
    concatenated and projected to ``out_channels``. The high-level map is
    bilinearly upsampled when it arrives at half the skip's resolution.
    """

    def __init__(self, low_channels: int, high_channels: int, out_channels: int,
                 reduction: int = 8):
        super().__init__()
        self.low_gate = ChannelGate(low_channels, reduction)
        self.high_gate = ChannelGate(high_channels, reduction)
        self.project = nn.Conv2d(low_channels + high_channels, out_channels,
                                 kernel_size=1)

    def forward(self, low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
        if low.shape[1] != self.low_gate.fc2.out_channels:
            raise ShapeError(
                f"fusion expects {self.low_gate.fc2.out_channels} low channels, "
                f"got {low.shape[1]}"
            )
        if high.shape[1] != self.high_gate.fc2.out_channels:
            raise ShapeError(
                f"fusion expects {self.high_gate.fc2.out_channels} high channels, "
                f"got {high.shape[1]}"
            )
        lh, lw = low.shape[-2:]
        hh, hw = high.shape[-2:]
        if (hh, hw) != (lh, lw):
            if (hh * 2, hw * 2) != (lh, lw):
                raise ShapeError(
                    f"high map {hh}x{hw} is neither equal to nor half of the "
                    f"skip map {lh}x{lw}"
                )
            high = F.interpolate(high, size=(lh, lw), mode="bilinear",
                                 align_corners=False)
        fused = torch.cat([low * self.low_gate(low), high * self.high_gate(high)],
                          dim=1)
        return self.project(fused)
