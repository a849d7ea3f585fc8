"""Dataset scanning, random patch extraction, augmentation, epoch batching.

The dataset layout is ``root/image/<name>`` paired with ``root/mask/<name>``
(same stem, any raster extension). Masks are 8-bit grayscale with values
{0, 255} on disk and are binarized to {0, 1} at load time (threshold 127,
tolerating anti-aliased edges).

Every random draw comes from a per-patch substream derived from (seed,
patch index), so the epoch stream is a pure function of (records, config,
seed) no matter how many workers extract patches.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

from .config import IMAGENET_MEAN, IMAGENET_STD, AugmentationSpec, DataConfig
from .errors import ConfigurationError, DatasetError

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"}

MASK_BINARIZE_THRESHOLD = 127


@dataclass(frozen=True)
class SampleRecord:
    """One image/mask pair on disk."""

    image_path: Path
    mask_path: Path
    width: int
    height: int
    task_tag: str | None = None


@dataclass
class PatchBatch:
    """Normalized image patches and their binary masks."""

    images: torch.Tensor  # (B, 3, P, P) float32
    masks: torch.Tensor  # (B, 1, P, P) float32 in {0, 1}


def _list_images(directory: Path) -> dict[str, Path]:
    files: dict[str, Path] = {}
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS or not path.is_file():
            continue
        if path.stem in files:
            raise DatasetError(
                f"duplicate stem {path.stem!r}: {files[path.stem].name} and "
                f"{path.name} in {directory}"
            )
        files[path.stem] = path
    return files


def _image_size(path: Path) -> tuple[int, int]:
    try:
        with Image.open(path) as img:
            return img.size  # (width, height)
    except Exception as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def scan_dataset(root_dir: str | Path, task_tag: str | None = None) -> list[SampleRecord]:
    """Pair images with masks and validate dimensions, sorted by filename."""
    root = Path(root_dir)
    image_dir = root / "image"
    mask_dir = root / "mask"
    for sub in (image_dir, mask_dir):
        if not sub.is_dir():
            raise DatasetError(f"dataset directory missing: {sub}")
    images = _list_images(image_dir)
    masks = _list_images(mask_dir)

    for stem in sorted(masks.keys() - images.keys()):
        raise DatasetError(f"mask without image: {masks[stem]}")
    records = []
    for stem in sorted(images):
        if stem not in masks:
            raise DatasetError(f"image without mask: {images[stem]}")
        iw, ih = _image_size(images[stem])
        mw, mh = _image_size(masks[stem])
        if (iw, ih) != (mw, mh):
            raise DatasetError(
                f"dimension mismatch for {images[stem].name}: image {iw}x{ih}, "
                f"mask {mw}x{mh}"
            )
        records.append(SampleRecord(images[stem], masks[stem], iw, ih, task_tag))
    return records


@lru_cache(maxsize=16)
def _load_pair_cached(image_path: str, mask_path: str) -> tuple[np.ndarray, np.ndarray]:
    with Image.open(image_path) as img:
        image = np.asarray(img.convert("RGB"), dtype=np.uint8)
    with Image.open(mask_path) as img:
        mask_raw = np.asarray(img.convert("L"))
    mask = (mask_raw > MASK_BINARIZE_THRESHOLD).astype(np.uint8)
    return image, mask


def load_pair(record: SampleRecord) -> tuple[np.ndarray, np.ndarray]:
    """Load (H, W, 3) uint8 image and (H, W) {0,1} mask."""
    try:
        return _load_pair_cached(str(record.image_path), str(record.mask_path))
    except DatasetError:
        raise
    except Exception as exc:
        raise DatasetError(f"unreadable image {record.image_path}: {exc}") from exc


def reflect_pad_to(array: np.ndarray, height: int, width: int) -> np.ndarray:
    """Reflection-pad the trailing spatial edges up to (height, width).

    Applied in steps so it also works when the padding exceeds the array
    size (np.pad's reflect mode caps each step at size - 1).
    """
    while array.shape[0] < height or array.shape[1] < width:
        pad_h = min(height - array.shape[0], max(array.shape[0] - 1, 1))
        pad_w = min(width - array.shape[1], max(array.shape[1] - 1, 1))
        pads = [(0, max(pad_h, 0)), (0, max(pad_w, 0))]
        pads += [(0, 0)] * (array.ndim - 2)
        mode = "reflect" if min(array.shape[:2]) > 1 else "edge"
        array = np.pad(array, pads, mode=mode)
    return array


def extract_random_patch(record: SampleRecord, patch: int,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Crop the same uniformly-drawn patch from image and mask."""
    image, mask = load_pair(record)
    image = reflect_pad_to(image, patch, patch)
    mask = reflect_pad_to(mask, patch, patch)
    h, w = mask.shape
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    return (
        image[top:top + patch, left:left + patch],
        mask[top:top + patch, left:left + patch],
    )


def apply_flips(image_patch: np.ndarray, mask_patch: np.ndarray,
                spec: AugmentationSpec,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Flip image and mask together; one draw per enabled axis."""
    if image_patch.shape[:2] != mask_patch.shape[:2]:
        raise DatasetError(
            f"image patch {image_patch.shape[:2]} and mask patch "
            f"{mask_patch.shape[:2]} disagree"
        )
    if spec.hflip and rng.random() < spec.probability:
        image_patch = image_patch[:, ::-1]
        mask_patch = mask_patch[:, ::-1]
    if spec.vflip and rng.random() < spec.probability:
        image_patch = image_patch[::-1, :]
        mask_patch = mask_patch[::-1, :]
    return np.ascontiguousarray(image_patch), np.ascontiguousarray(mask_patch)


def normalize_image(raw_rgb: np.ndarray,
                    mean: Sequence[float] | None = None,
                    std: Sequence[float] | None = None) -> np.ndarray:
    """Map uint8-range RGB (H, W, 3) to standardized float32 (3, H, W)."""
    mean = IMAGENET_MEAN if mean is None else mean
    std = IMAGENET_STD if std is None else std
    values = np.asarray(raw_rgb, dtype=np.float32)
    if values.min() < 0 or values.max() > 255:
        raise DatasetError(
            f"raw pixel values outside [0, 255]: range "
            f"[{values.min():.3f}, {values.max():.3f}]"
        )
    values = values / 255.0
    values = (values - np.asarray(mean, dtype=np.float32)) / np.asarray(
        std, dtype=np.float32
    )
    return values.transpose(2, 0, 1)


def _patch_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _num_workers() -> int:
    env = os.environ.get("SEG_NUM_WORKERS", "").strip()
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _make_patch(records: Sequence[SampleRecord], record_index: int, index: int,
                patch: int, aug: AugmentationSpec, seed: int,
                cfg: DataConfig) -> tuple[np.ndarray, np.ndarray]:
    rng = _patch_seed(seed, index)
    img, msk = extract_random_patch(records[record_index], patch, rng)
    if cfg.foreground_balanced:
        # redraw (bounded) until the patch contains tumor pixels
        for _ in range(9):
            if msk.any():
                break
            img, msk = extract_random_patch(records[record_index], patch, rng)
    img, msk = apply_flips(img, msk, aug, rng)
    return normalize_image(img, cfg.normalize_mean, cfg.normalize_std), msk


def make_epoch(records: Sequence[SampleRecord], batch_size: int,
               patches_per_image: int, aug: AugmentationSpec, seed: int,
               cfg: DataConfig | None = None) -> Iterator[PatchBatch]:
    """Yield one epoch of augmented batches, deterministically from ``seed``.

    One epoch is ``patches_per_image * len(records)`` patches in a seeded
    random order; the final batch may be smaller than ``batch_size``.
    """
    if not records:
        raise ConfigurationError("dataset is empty: no records to train on")
    if batch_size < 1 or patches_per_image < 1:
        raise ConfigurationError("batch_size and patches_per_image must be >= 1")
    cfg = cfg or DataConfig()
    patch = cfg.patch_size

    order_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    record_indices = np.repeat(np.arange(len(records)), patches_per_image)
    order = order_rng.permutation(record_indices)

    workers = _num_workers()
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        args = [
            (records, int(rec_idx), start + offset, patch, aug, seed, cfg)
            for offset, rec_idx in enumerate(chunk)
        ]
        if workers > 1 and len(args) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda a: _make_patch(*a), args))
        else:
            results = [_make_patch(*a) for a in args]
        images = torch.from_numpy(np.stack([r[0] for r in results]))
        masks = torch.from_numpy(
            np.stack([r[1] for r in results]).astype(np.float32)
        ).unsqueeze(1)
        yield PatchBatch(images=images, masks=masks)


def split_records(records: Sequence[SampleRecord],
                  val_fraction: float) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Stable train/val split by filename hash (independent of ordering)."""
    import hashlib

    if val_fraction <= 0:
        return list(records), []
    train, val = [], []
    for record in records:
        digest = hashlib.blake2s(record.image_path.name.encode()).digest()
        bucket = int.from_bytes(digest[:2], "little") / 65536.0
        (val if bucket < val_fraction else train).append(record)
    if not train:  # degenerate split on tiny datasets: keep training possible
        return list(records), []
    return train, val
