"""Overlap metrics between binary masks."""

from __future__ import annotations

import numpy as np
import torch


def _as_binary(mask) -> np.ndarray:
    array = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    values = np.unique(array)
    if not np.all(np.isin(values, (0, 1))):
        raise ValueError(f"mask is not binary, found values {values[:10]}")
    return array.astype(bool)


def dice_score(pred_mask, true_mask) -> float:
    """2|A∩B| / (|A|+|B|); defined as 1.0 when both masks are empty."""
    a = _as_binary(pred_mask)
    b = _as_binary(true_mask)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou_score(pred_mask, true_mask) -> float:
    """|A∩B| / |A∪B|; defined as 1.0 when both masks are empty."""
    a = _as_binary(pred_mask)
    b = _as_binary(true_mask)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union
