"""Configuration dataclasses, YAML loading, and dotted-path overrides.

A run is described by one ``RunConfig`` which nests the per-subsystem
configs. ``load_run_config`` reads a YAML file and applies command-line
overrides of the form ``--section.key=value``; ``dump_run_config`` writes
the fully resolved config back out so a run can be reproduced exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigurationError

# Channel statistics of the encoder's pretraining corpus, used to normalize
# inputs so pretrained features see the distribution they were trained on.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ModelConfig:
    """Architectural hyperparameters of the encoder-decoder network."""

    stage_dims: list[int] = field(default_factory=lambda: [48, 96, 192, 384, 768])
    stage_blocks: list[int] = field(default_factory=lambda: [2, 2, 9, 2])
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_padding: int = 3
    patch_size: int = 2
    window_size: int = 7
    num_heads: list[int] = field(default_factory=lambda: [3, 6, 12, 24])
    mlp_ratio: float = 4.0
    in_channels: int = 3
    out_channels: int = 1

    def validate(self) -> None:
        if len(self.stage_dims) != 5:
            raise ConfigurationError(
                f"stage_dims must have 5 entries, got {len(self.stage_dims)}"
            )
        if len(self.stage_blocks) != 4:
            raise ConfigurationError(
                f"stage_blocks must have 4 entries, got {len(self.stage_blocks)}"
            )
        if len(self.num_heads) != 4:
            raise ConfigurationError(
                f"num_heads must have 4 entries, got {len(self.num_heads)}"
            )
        for name in ("stem_kernel", "stem_stride", "patch_size", "window_size",
                     "in_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.stem_padding < 0:
            raise ConfigurationError("stem_padding must be non-negative")
        if self.mlp_ratio <= 0:
            raise ConfigurationError("mlp_ratio must be positive")
        if any(d < 1 for d in self.stage_dims):
            raise ConfigurationError("stage_dims entries must be positive")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigurationError("stage_blocks entries must be positive")
        for i in range(4):
            if self.stage_dims[i + 1] != 2 * self.stage_dims[i]:
                raise ConfigurationError(
                    "stage_dims must double at every stage: "
                    f"stage_dims[{i + 1}]={self.stage_dims[i + 1]} != "
                    f"2*stage_dims[{i}]={2 * self.stage_dims[i]}"
                )
        for i, heads in enumerate(self.num_heads):
            if heads < 1:
                raise ConfigurationError("num_heads entries must be positive")
            if self.stage_dims[i + 1] % heads != 0:
                raise ConfigurationError(
                    f"stage_dims[{i + 1}]={self.stage_dims[i + 1]} is not divisible "
                    f"by num_heads[{i}]={heads}"
                )

    @property
    def total_stride(self) -> int:
        """Product of all encoder downsampling factors (input-size divisor)."""
        return self.stem_stride * self.patch_size * 2 ** 3


@dataclass
class AugmentationSpec:
    """Which flips to apply during training and with what probability."""

    hflip: bool = True
    vflip: bool = True
    probability: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError(
                f"flip probability must be in [0, 1], got {self.probability}"
            )


@dataclass
class DataConfig:
    """Dataset location and patch-extraction parameters."""

    root: str = ""
    patch_size: int = 224
    patches_per_image: int = 8
    val_fraction: float = 0.1
    foreground_balanced: bool = False
    normalize_mean: list[float] = field(default_factory=lambda: list(IMAGENET_MEAN))
    normalize_std: list[float] = field(default_factory=lambda: list(IMAGENET_STD))

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ConfigurationError("data.patch_size must be positive")
        if self.patches_per_image < 1:
            raise ConfigurationError("data.patches_per_image must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigurationError("data.val_fraction must be in [0, 1)")
        if len(self.normalize_mean) != 3 or len(self.normalize_std) != 3:
            raise ConfigurationError("normalization stats must have 3 channels")


@dataclass
class TrainConfig:
    """Optimization hyperparameters."""

    learning_rate: float = 0.0001
    batch_size: int = 32
    epochs: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    dice_weight: float = 1.0
    bce_weight: float = 1.0
    grad_clip: float = 0.0
    checkpoint_every: int = 10

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("train.learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be positive")
        if self.epochs < 1:
            raise ConfigurationError("train.epochs must be positive")
        if self.dice_weight < 0 or self.bce_weight < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.dice_weight + self.bce_weight <= 0:
            raise ConfigurationError("at least one loss weight must be positive")
        if self.checkpoint_every < 1:
            raise ConfigurationError("train.checkpoint_every must be positive")


@dataclass
class SlidingWindowConfig:
    """Tiled-inference geometry and post-processing."""

    window: int = 224
    stride: int = 112
    threshold: float = 0.5
    blend: str = "mean"

    def validate(self) -> None:
        if self.window < 1:
            raise ConfigurationError("infer.window must be positive")
        if not 1 <= self.stride <= self.window:
            raise ConfigurationError(
                f"infer.stride must satisfy 1 <= stride <= window, "
                f"got stride={self.stride}, window={self.window}"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("infer.threshold must be in (0, 1)")
        if self.blend != "mean":
            raise ConfigurationError(
                f"infer.blend supports only 'mean', got {self.blend!r}"
            )


@dataclass
class RunConfig:
    """Everything one training/inference run needs, in one place."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    aug: AugmentationSpec = field(default_factory=AugmentationSpec)
    infer: SlidingWindowConfig = field(default_factory=SlidingWindowConfig)
    pretrained_manifest: str | None = None
    output_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.aug.validate()
        self.infer.validate()


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "aug": AugmentationSpec,
    "infer": SlidingWindowConfig,
}

# Accepted spellings that route to a canonical (section, key) destination.
_KEY_ALIASES = {
    ("data", "batch_size"): ("train", "batch_size"),
}


def derive_seed(root_seed: int, label: str) -> int:
    """Derive a named sub-seed from the root seed, stably across runs."""
    digest = hashlib.blake2s(f"{root_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _coerce(value: str, target_type: Any, key: str) -> Any:
    origin = getattr(target_type, "__origin__", None)
    if origin is list:
        elem = target_type.__args__[0]
        return [_coerce(v.strip(), elem, key) for v in value.split(",") if v.strip()]
    if target_type is bool or target_type == "bool":
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"cannot parse boolean for {key!r}: {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def _field_types(cls: type) -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _resolve_type(annotation: Any) -> Any:
    # dataclass field types arrive as strings because of
    # `from __future__ import annotations`
    if isinstance(annotation, str):
        namespace = {"list": list, "int": int, "float": float, "str": str,
                     "bool": bool}
        try:
            return eval(annotation, namespace)  # noqa: S307 - trusted literals
        except Exception:
            return str
    return annotation


def apply_override(config: RunConfig, dotted_key: str, raw_value: str) -> None:
    """Set one ``section.key`` (or top-level key) from its string form."""
    parts = dotted_key.split(".")
    if len(parts) == 1:
        key = parts[0]
        if key == "seed":
            config.seed = int(raw_value)
        elif key == "output_dir":
            config.output_dir = raw_value
        elif key == "pretrained_manifest":
            config.pretrained_manifest = raw_value or None
        else:
            raise ConfigurationError(f"unknown config key: {dotted_key!r}")
        return
    if len(parts) != 2:
        raise ConfigurationError(f"override keys are 'section.key', got {dotted_key!r}")
    section, key = parts
    section, key = _KEY_ALIASES.get((section, key), (section, key))
    if section not in _SECTIONS:
        raise ConfigurationError(f"unknown config section: {section!r}")
    sub = getattr(config, section)
    types = _field_types(type(sub))
    if key not in types:
        raise ConfigurationError(f"unknown config key: {dotted_key!r}")
    setattr(sub, key, _coerce(raw_value, _resolve_type(types[key]), dotted_key))


def run_config_from_dict(raw: dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a nested plain dict (e.g. parsed YAML)."""
    config = RunConfig()
    if not raw:
        return config
    for section, cls in _SECTIONS.items():
        values = raw.get(section) or {}
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {section!r} must be a mapping")
        sub = getattr(config, section)
        known = _field_types(cls)
        for key, value in values.items():
            dest_section, dest_key = _KEY_ALIASES.get((section, key), (section, key))
            if dest_section != section:
                setattr(getattr(config, dest_section), dest_key, value)
                continue
            if key not in known:
                raise ConfigurationError(f"unknown config key: {section}.{key}")
            setattr(sub, key, value)
    for key in ("seed", "output_dir", "pretrained_manifest"):
        if key in raw and raw[key] is not None:
            setattr(config, key, raw[key])
    return config


def run_config_to_dict(config: RunConfig) -> dict[str, Any]:
    out: dict[str, Any] = {
        section: dataclasses.asdict(getattr(config, section))
        for section in _SECTIONS
    }
    out["pretrained_manifest"] = config.pretrained_manifest
    out["output_dir"] = config.output_dir
    out["seed"] = config.seed
    return out


def load_run_config(path: str | Path | None,
                    overrides: dict[str, str] | None = None) -> RunConfig:
    """Load YAML config (defaults if ``path`` is None), apply overrides, validate."""
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"could not parse config {path}: {exc}") from exc
    config = run_config_from_dict(raw)
    for key, value in (overrides or {}).items():
        apply_override(config, key, value)
    config.validate()
    return config


def dump_run_config(config: RunConfig, path: str | Path) -> None:
    """Write the resolved config as YAML (the reproducibility contract)."""
    Path(path).write_text(
        yaml.safe_dump(run_config_to_dict(config), sort_keys=True)
    )
