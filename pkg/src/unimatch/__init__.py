"""Unified multi-entity, multi-domain top-k matching."""

from .config import (
    DataConfig,
    EvalConfig,
    IndexConfig,
    ModelConfig,
    TrainConfig,
    load_config,
)
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    NumericsError,
    SchemaError,
    UnimatchError,
)
from .matcher import UnifiedMatcher
from .model import Model, init_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataConfig",
    "DimensionError",
    "DivergenceError",
    "EvalConfig",
    "IndexConfig",
    "Model",
    "ModelConfig",
    "NumericsError",
    "SchemaError",
    "TrainConfig",
    "UnifiedMatcher",
    "UnimatchError",
    "init_model",
    "load_checkpoint",
    "load_config",
    "save_checkpoint",
    "__version__",
]
