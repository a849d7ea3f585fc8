"""Segmentation losses computed from raw logits."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ShapeError

DICE_SMOOTH = 1.0


def _check_shapes(logits: torch.Tensor, targets: torch.Tensor) -> None:
    if logits.shape != targets.shape:
        raise ShapeError(
            f"logits shape {tuple(logits.shape)} != targets shape "
            f"{tuple(targets.shape)}"
        )


def dice_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), p = sigmoid(logits)."""
    _check_shapes(logits, targets)
    p = torch.sigmoid(logits)
    intersection = (p * targets).sum()
    denom = p.sum() + targets.sum()
    return 1.0 - (2.0 * intersection + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def bce_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy, evaluated stably in log space."""
    _check_shapes(logits, targets)
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def combined_loss(logits: torch.Tensor, targets: torch.Tensor,
                  dice_weight: float, bce_weight: float) -> torch.Tensor:
    return dice_weight * dice_loss(logits, targets) + bce_weight * bce_loss(
        logits, targets
    )
