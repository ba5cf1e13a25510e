"""Cross-modal selective state-space models for visual question answering."""

from .config import ModelConfig, RunConfig, TrainConfig, load_config
from .model import LCMF
from .scan import SSMParams, selective_scan
from .tensor import ConfigurationError, ContractError, DimensionError, Tape, Tensor, no_tape

__version__ = "0.1.0"

__all__ = [
    "LCMF",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "ModelConfig",
    "RunConfig",
    "SSMParams",
    "Tape",
    "Tensor",
    "TrainConfig",
    "load_config",
    "no_tape",
    "selective_scan",
]
