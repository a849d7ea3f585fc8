"""histoseg: windowed-transformer segmentation of histopathology ROIs."""

__version__ = "0.1.0"

from .config import (
    AugmentationSpec,
    DataConfig,
    ModelConfig,
    RunConfig,
    SlidingWindowConfig,
    TrainConfig,
    load_run_config,
)
from .model import SegmentationModel, build_model

__all__ = [
    "AugmentationSpec",
    "DataConfig",
    "ModelConfig",
    "RunConfig",
    "SegmentationModel",
    "SlidingWindowConfig",
    "TrainConfig",
    "build_model",
    "load_run_config",
    "__version__",
]
