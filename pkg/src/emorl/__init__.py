"""Object-centric scene decomposition with two-stage amortized inference."""

from .config import (
    ConfigError,
    DataConfig,
    EvalConfig,
    GecoConfig,
    GeneratorPreset,
    LrSchedule,
    ModelConfig,
    RunConfig,
    TrainConfig,
    config_hash,
    load_config,
    preset_config,
)
from .model import EfficientMorl, ForwardResult, build_model

__all__ = [
    "ConfigError",
    "DataConfig",
    "EvalConfig",
    "GecoConfig",
    "GeneratorPreset",
    "LrSchedule",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "config_hash",
    "load_config",
    "preset_config",
    "EfficientMorl",
    "ForwardResult",
    "build_model",
]

__version__ = "0.1.0"
