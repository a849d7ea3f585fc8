"""Shared fixtures: reduced configs, synthetic datasets, fake weight archives."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from histoseg.config import (
    DataConfig,
    ModelConfig,
    RunConfig,
    SlidingWindowConfig,
    TrainConfig,
)
from histoseg.pretrained import write_archive


def reduced_model_config(**overrides) -> ModelConfig:
    """Small but structurally complete config for CPU-speed tests."""
    kwargs = dict(
        stage_dims=[6, 12, 24, 48, 96],
        stage_blocks=[1, 1, 2, 1],
        window_size=4,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture
def reduced_config() -> ModelConfig:
    return reduced_model_config()


def make_rectangle_dataset(root: Path, count: int = 4, size: int = 64,
                           seed: int = 0) -> Path:
    """Images with a bright filled rectangle on dark noise; masks mark it."""
    (root / "image").mkdir(parents=True, exist_ok=True)
    (root / "mask").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(count):
        image = rng.integers(0, 60, (size, size, 3), dtype=np.uint8)
        mask = np.zeros((size, size), dtype=np.uint8)
        top, left = rng.integers(4, size // 3, 2)
        bottom = int(top + size // 2)
        right = int(left + size // 2)
        image[top:bottom, left:right] = rng.integers(190, 250, 3, dtype=np.uint8)
        mask[top:bottom, left:right] = 255
        Image.fromarray(image).save(root / "image" / f"roi_{i:02d}.png")
        Image.fromarray(mask).save(root / "mask" / f"roi_{i:02d}.png")
    return root


@pytest.fixture
def rectangle_dataset(tmp_path: Path) -> Path:
    return make_rectangle_dataset(tmp_path / "ds")


def tiny_run_config(dataset_root: Path, output_dir: Path, **train_overrides) -> RunConfig:
    cfg = RunConfig()
    cfg.model = reduced_model_config()
    cfg.data = DataConfig(root=str(dataset_root), patch_size=32,
                          patches_per_image=4, val_fraction=0.0)
    cfg.train = TrainConfig(epochs=2, batch_size=8, learning_rate=1e-3,
                            checkpoint_every=1)
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    cfg.infer = SlidingWindowConfig(window=32, stride=16)
    cfg.output_dir = str(output_dir)
    cfg.seed = 7
    cfg.validate()
    return cfg


def swin_tiny_state_arrays(seed: int = 0) -> list[tuple[str, np.ndarray]]:
    """Float tensors with the published tiny checkpoint's names and shapes."""
    rng = np.random.default_rng(seed)
    depths = [2, 2, 6, 2]
    heads = [3, 6, 12, 24]
    embed = 96
    window = 7

    def t(shape):
        return rng.standard_normal(shape).astype(np.float32) * 0.02

    arrays: list[tuple[str, np.ndarray]] = [
        ("patch_embed.proj.weight", t((embed, 3, 4, 4))),
        ("patch_embed.proj.bias", t((embed,))),
        ("patch_embed.norm.weight", t((embed,))),
        ("patch_embed.norm.bias", t((embed,))),
    ]
    for layer, depth in enumerate(depths):
        dim = embed * 2 ** layer
        for j in range(depth):
            prefix = f"layers.{layer}.blocks.{j}"
            arrays += [
                (f"{prefix}.norm1.weight", t((dim,))),
                (f"{prefix}.norm1.bias", t((dim,))),
                (f"{prefix}.attn.relative_position_bias_table",
                 t(((2 * window - 1) ** 2, heads[layer]))),
                (f"{prefix}.attn.qkv.weight", t((3 * dim, dim))),
                (f"{prefix}.attn.qkv.bias", t((3 * dim,))),
                (f"{prefix}.attn.proj.weight", t((dim, dim))),
                (f"{prefix}.attn.proj.bias", t((dim,))),
                (f"{prefix}.norm2.weight", t((dim,))),
                (f"{prefix}.norm2.bias", t((dim,))),
                (f"{prefix}.mlp.fc1.weight", t((4 * dim, dim))),
                (f"{prefix}.mlp.fc1.bias", t((4 * dim,))),
                (f"{prefix}.mlp.fc2.weight", t((dim, 4 * dim))),
                (f"{prefix}.mlp.fc2.bias", t((dim,))),
            ]
        if layer < 3:
            prefix = f"layers.{layer}.downsample"
            arrays += [
                (f"{prefix}.norm.weight", t((4 * dim,))),
                (f"{prefix}.norm.bias", t((4 * dim,))),
                (f"{prefix}.reduction.weight", t((2 * dim, 4 * dim))),
            ]
    arrays += [
        ("norm.weight", t((8 * embed,))),
        ("norm.bias", t((8 * embed,))),
        ("head.weight", t((1000, 8 * embed))),
        ("head.bias", t((1000,))),
    ]
    return arrays


@pytest.fixture(scope="session")
def swin_tiny_manifest(tmp_path_factory: pytest.TempPathFactory):
    """A converted archive structurally identical to the published release."""
    directory = tmp_path_factory.mktemp("weights")
    manifest_path = directory / "swin_tiny.manifest"
    return write_archive(swin_tiny_state_arrays(), manifest_path)
