"""Whole-ROI prediction by overlapping sliding windows.

Window logits are accumulated on a reflection-padded canvas together with a
hit-count map; the blended logit at each pixel is the arithmetic mean of
every window that covered it. Tiles are visited in plan order, so the
result is deterministic for a given (weights, image, config).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import SlidingWindowConfig
from .errors import ShapeError

OVERLAY_COLOR = (255, 0, 0)


@dataclass(frozen=True)
class TilePlan:
    """Deterministic decomposition of an image into overlapping windows."""

    image_size: tuple[int, int]
    tiles: list[tuple[int, int]]
    padded_size: tuple[int, int]


def _axis_corners(size: int, window: int, stride: int) -> tuple[list[int], int]:
    span = max(size, window) - window
    count = -(-span // stride) + 1  # ceil division
    padded = window + stride * (count - 1)
    return [i * stride for i in range(count)], padded


def plan_tiles(image_size: tuple[int, int], cfg: SlidingWindowConfig) -> TilePlan:
    """Corners at stride multiples; the image is padded so the last window
    per axis ends exactly at the padded edge."""
    cfg.validate()
    h, w = image_size
    if h < 1 or w < 1:
        raise ShapeError(f"image size must be positive, got {image_size}")
    rows, padded_h = _axis_corners(h, cfg.window, cfg.stride)
    cols, padded_w = _axis_corners(w, cfg.window, cfg.stride)
    tiles = [(r, c) for r in rows for c in cols]
    return TilePlan(image_size=(h, w), tiles=tiles, padded_size=(padded_h, padded_w))


def hit_counts(plan: TilePlan, window: int) -> np.ndarray:
    """Per-pixel window multiplicity on the padded canvas."""
    counts = np.zeros(plan.padded_size, dtype=np.int32)
    for row, col in plan.tiles:
        counts[row:row + window, col:col + window] += 1
    return counts


def _reflect_pad_chw(image: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Reflection-pad (C, H, W) on bottom/right, stepwise for large pads."""
    while image.shape[-2] < height or image.shape[-1] < width:
        pad_h = min(height - image.shape[-2], max(image.shape[-2] - 1, 1))
        pad_w = min(width - image.shape[-1], max(image.shape[-1] - 1, 1))
        mode = "reflect" if min(image.shape[-2:]) > 1 else "replicate"
        image = torch.nn.functional.pad(
            image.unsqueeze(0), (0, max(pad_w, 0), 0, max(pad_h, 0)), mode=mode
        ).squeeze(0)
    return image


def sliding_window_predict(model: torch.nn.Module, image: torch.Tensor,
                           cfg: SlidingWindowConfig,
                           tile_batch: int = 1) -> torch.Tensor:
    """Predict a full (H, W) probability map for a normalized (3, H, W) image."""
    if image.dim() != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {tuple(image.shape)}")
    stride_req = getattr(model, "total_stride", 32)
    if cfg.window % stride_req:
        raise ShapeError(
            f"infer.window={cfg.window} must be divisible by the model "
            f"stride {stride_req}"
        )
    h, w = image.shape[-2:]
    plan = plan_tiles((h, w), cfg)
    padded = _reflect_pad_chw(image, *plan.padded_size)

    logit_sum = torch.zeros(plan.padded_size, dtype=torch.float32)
    counts = torch.zeros(plan.padded_size, dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        for start in range(0, len(plan.tiles), max(tile_batch, 1)):
            chunk = plan.tiles[start:start + max(tile_batch, 1)]
            windows = torch.stack([
                padded[:, r:r + cfg.window, c:c + cfg.window] for r, c in chunk
            ])
            logits = model(windows)[:, 0]  # (n, window, window)
            for (r, c), tile_logits in zip(chunk, logits):
                logit_sum[r:r + cfg.window, c:c + cfg.window] += tile_logits
                counts[r:r + cfg.window, c:c + cfg.window] += 1.0
    probabilities = torch.sigmoid(logit_sum / counts)
    return probabilities[:h, :w]


def binarize(probability_map: torch.Tensor | np.ndarray,
             threshold: float) -> np.ndarray:
    """Strictly-greater threshold to a {0, 1} uint8 mask."""
    values = (
        probability_map.detach().cpu().numpy()
        if isinstance(probability_map, torch.Tensor)
        else np.asarray(probability_map)
    )
    return (values > threshold).astype(np.uint8)


def render_overlay(image: np.ndarray, binary_mask: np.ndarray,
                   alpha: float) -> np.ndarray:
    """Tint mask foreground with the highlight color at opacity ``alpha``."""
    if image.shape[:2] != binary_mask.shape[:2]:
        raise ShapeError(
            f"image {image.shape[:2]} and mask {binary_mask.shape[:2]} disagree"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    out = image.astype(np.float32).copy()
    fg = binary_mask.astype(bool)
    highlight = np.asarray(OVERLAY_COLOR, dtype=np.float32)
    out[fg] = (1.0 - alpha) * out[fg] + alpha * highlight
    return np.round(out).clip(0, 255).astype(np.uint8)
