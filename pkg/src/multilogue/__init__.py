"""Multimodal conversational sentiment and emotion model built on a small numpy autodiff core."""

from .errors import (ConfigError, ContractError, DegenerateError, DimensionError, FormatError, InputError,
                     MultilogueError, ParseError, SchemaError)
from .model import ModelConfig, ModelParams, forward_conversation, probe_representations
from .training import TrainConfig, init_params, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateError", "DimensionError", "FormatError", "InputError",
    "MultilogueError", "ParseError", "SchemaError", "ModelConfig", "ModelParams", "TrainConfig",
    "forward_conversation", "probe_representations", "init_params", "train",
]
