"""Windowed-transformer encoder: stem, patch embedding, window attention blocks.

Feature maps travel between stages channel-major as (B, C, H, W); inside a
stage the blocks work on token layout (B, H*W, C). Window partitioning pads
on the right/bottom to the next window multiple and masks padded tokens in
attention, so any spatial size the stage chain can produce is valid.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError

PAD_ATTN_BIAS = -100.0  # added to attention logits toward masked tokens


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """Split a (B, C, H, W) map into non-overlapping windows.

    Pads H and W up to the next multiple of ``window`` with zeros before
    splitting. Returns (B * num_windows, window*window, C).
    """
    if x.dim() != 4:
        raise ShapeError(f"expected a 4-d (B, C, H, W) tensor, got {tuple(x.shape)}")
    b, c, h, w = x.shape
    pad_h = (window - h % window) % window
    pad_w = (window - w % window) % window
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h))
    hp, wp = h + pad_h, w + pad_w
    x = x.permute(0, 2, 3, 1)  # B, Hp, Wp, C
    x = x.view(b, hp // window, window, wp // window, window, c)
    windows = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)
    return windows


def window_reverse(windows: torch.Tensor, spatial: tuple[int, int]) -> torch.Tensor:
    """Exact inverse of :func:`window_partition` back to (B, C, H, W)."""
    if windows.dim() != 3:
        raise ShapeError(
            f"expected (num_windows*B, window^2, C) windows, got {tuple(windows.shape)}"
        )
    h, w = spatial
    window = math.isqrt(windows.shape[1])
    if window * window != windows.shape[1]:
        raise ShapeError(f"window token count {windows.shape[1]} is not a square")
    hp = math.ceil(h / window) * window
    wp = math.ceil(w / window) * window
    num_windows = (hp // window) * (wp // window)
    if windows.shape[0] % num_windows != 0:
        raise ShapeError(
            f"{windows.shape[0]} windows do not tile a {h}x{w} map "
            f"with window {window}"
        )
    b = windows.shape[0] // num_windows
    c = windows.shape[2]
    x = windows.view(b, hp // window, wp // window, window, window, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
    x = x[:, :h, :w, :]
    return x.permute(0, 3, 1, 2).contiguous()


def relative_position_index(window: int) -> torch.Tensor:
    """Pairwise relative-offset index into the (2w-1)^2 bias table."""
    coords = torch.stack(
        torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")
    )  # 2, w, w
    flat = coords.flatten(1)  # 2, w*w
    rel = flat[:, :, None] - flat[:, None, :]  # 2, w*w, w*w
    rel = rel.permute(1, 2, 0).contiguous()
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    return rel.sum(-1)  # w*w, w*w


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with relative position bias."""

    def __init__(self, dim: int, window: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        head_dim = dim // num_heads
        self.scale = head_dim ** -0.5

        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window - 1) ** 2, num_heads)
        )
        self.register_buffer(
            "relative_position_index", relative_position_index(window),
            persistent=False,
        )
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

        # When set, forward stores the last softmax map for inspection.
        self.record_attention = False
        self.last_attention: torch.Tensor | None = None

    def _bias(self) -> torch.Tensor:
        n = self.window * self.window
        bias = self.relative_position_bias_table[
            self.relative_position_index.reshape(-1)
        ].view(n, n, -1)
        return bias.permute(2, 0, 1).contiguous()  # heads, n, n

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """x: (num_windows*B, N, C); mask: (num_windows, N, N) additive or None."""
        b_, n, c = x.shape
        qkv = (
            self.qkv(x)
            .reshape(b_, n, 3, self.num_heads, c // self.num_heads)
            .permute(2, 0, 3, 1, 4)
        )
        q, k, v = qkv.unbind(0)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self._bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b_ // nw, nw, self.num_heads, n, n) + mask.unsqueeze(
                1
            ).unsqueeze(0)
            attn = attn.view(-1, self.num_heads, n, n)
        attn = attn.softmax(dim=-1)
        if self.record_attention:
            self.last_attention = attn.detach()

        x = (attn @ v).transpose(1, 2).reshape(b_, n, c)
        return self.proj(x)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def _shift_mask(hp: int, wp: int, h: int, w: int, window: int, shift: int,
                device: torch.device) -> torch.Tensor | None:
    """Additive attention mask for one padded (and possibly shifted) layout.

    Tokens in different shift regions, and real-vs-padded token pairs, get
    PAD_ATTN_BIAS. Returns (num_windows, N, N) or None when nothing is masked.
    """
    if shift == 0 and hp == h and wp == w:
        return None
    region = torch.zeros((1, hp, wp, 1), device=device)
    if shift > 0:
        slices = (
            slice(0, -window),
            slice(-window, -shift),
            slice(-shift, None),
        )
        count = 0
        for hs in slices:
            for ws in slices:
                region[:, hs, ws, :] = count
                count += 1
    if hp != h or wp != w:
        valid = torch.zeros((1, hp, wp, 1), device=device)
        valid[:, :h, :w, :] = 1.0
        if shift > 0:
            valid = torch.roll(valid, shifts=(-shift, -shift), dims=(1, 2))
        # padded tokens get region ids no real token can share
        pad_ids = torch.arange(hp * wp, device=device).view(1, hp, wp, 1) + 100.0
        region = torch.where(valid.bool(), region, pad_ids)
    region = region.view(1, hp // window, window, wp // window, window, 1)
    region = region.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window)
    diff = region.unsqueeze(1) - region.unsqueeze(2)
    return (diff != 0).to(torch.get_default_dtype()) * PAD_ATTN_BIAS


class SwinBlock(nn.Module):
    """Pre-norm window attention + MLP, each with a residual connection."""

    def __init__(self, dim: int, num_heads: int, window: int, shift: int,
                 mlp_ratio: float):
        super().__init__()
        self.dim = dim
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor, spatial: tuple[int, int]) -> torch.Tensor:
        """x: (B, H*W, C) tokens for a map of the given spatial size."""
        h, w = spatial
        b, n, c = x.shape
        if n != h * w:
            raise ShapeError(f"token count {n} does not match spatial {h}x{w}")
        window = self.window
        # shifting is pointless once one window spans an axis
        shift = self.shift if min(h, w) > window else 0

        shortcut = x
        x = self.norm1(x).view(b, h, w, c)

        pad_h = (window - h % window) % window
        pad_w = (window - w % window) % window
        if pad_h or pad_w:
            x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
        hp, wp = h + pad_h, w + pad_w
        if shift > 0:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))

        x = x.view(b, hp // window, window, wp // window, window, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)

        mask = _shift_mask(hp, wp, h, w, window, shift, x.device)
        x = self.attn(x, mask)

        x = x.view(b, hp // window, wp // window, window, window, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, hp, wp, c)
        if shift > 0:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        if pad_h or pad_w:
            x = x[:, :h, :w, :]
        x = shortcut + x.reshape(b, n, c)

        x = x + self.mlp(self.norm2(x))
        return x


class PatchMerging(nn.Module):
    """Concatenate 2x2 neighborhoods and project: channels x2, spatial /2."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor, spatial: tuple[int, int]) -> torch.Tensor:
        h, w = spatial
        b, n, c = x.shape
        if n != h * w:
            raise ShapeError(f"token count {n} does not match spatial {h}x{w}")
        if h % 2 or w % 2:
            raise ShapeError(f"patch merging needs even spatial dims, got {h}x{w}")
        x = x.view(b, h, w, c)
        x = torch.cat(
            [x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]],
            dim=-1,
        )  # B, H/2, W/2, 4C
        x = x.view(b, (h // 2) * (w // 2), 4 * c)
        return self.reduction(self.norm(x))


class Stem(nn.Module):
    """Strided convolution + per-sample instance normalization (stage 1)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int, padding: int):
        super().__init__()
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=kernel,
                              stride=stride, padding=padding)
        self.norm = nn.InstanceNorm2d(out_channels, affine=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ShapeError(f"expected (B, C, H, W) input, got {tuple(x.shape)}")
        if x.shape[1] != self.conv.in_channels:
            raise ShapeError(
                f"stem expects {self.conv.in_channels} channels, got {x.shape[1]}"
            )
        if x.shape[-2] % self.stride or x.shape[-1] % self.stride:
            raise ShapeError(
                f"stem needs spatial dims divisible by {self.stride}, "
                f"got {x.shape[-2]}x{x.shape[-1]}"
            )
        return self.norm(self.conv(x))


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection into the first transformer stage.

    By policy this block is never initialized from pretrained weights: its
    patch size and input channels differ from the pretraining setup.
    """

    def __init__(self, in_channels: int, embed_dim: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch_size,
                              stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.proj.in_channels:
            raise ShapeError(
                f"patch embedding expects {self.proj.in_channels} channels, "
                f"got {x.shape[1]}"
            )
        if x.shape[-2] % self.patch_size or x.shape[-1] % self.patch_size:
            raise ShapeError(
                f"spatial dims {x.shape[-2]}x{x.shape[-1]} not divisible by "
                f"patch size {self.patch_size}"
            )
        x = self.proj(x)  # B, D, H/p, W/p
        b, c, h, w = x.shape
        x = self.norm(x.flatten(2).transpose(1, 2))
        return x.transpose(1, 2).view(b, c, h, w)


class WindowStage(nn.Module):
    """One transformer stage: optional patch merging, then Swin blocks.

    Blocks alternate unshifted and shifted windows (shift = window // 2 on
    odd-indexed blocks).
    """

    def __init__(self, dim: int, depth: int, num_heads: int, window: int,
                 mlp_ratio: float, downsample: bool):
        super().__init__()
        self.dim = dim
        self.downsample = PatchMerging(dim // 2) if downsample else None
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window,
                      shift=0 if i % 2 == 0 else window // 2,
                      mlp_ratio=mlp_ratio)
            for i in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> (B, C', H', W'); halves spatial when merging."""
        b, c, h, w = x.shape
        expected = self.dim // 2 if self.downsample is not None else self.dim
        if c != expected:
            raise ShapeError(f"stage expects {expected} channels, got {c}")
        tokens = x.flatten(2).transpose(1, 2)  # B, H*W, C
        if self.downsample is not None:
            tokens = self.downsample(tokens, (h, w))
            h, w = h // 2, w // 2
        for block in self.blocks:
            tokens = block(tokens, (h, w))
        return tokens.transpose(1, 2).reshape(b, self.dim, h, w)
