"""Gland instance segmentation: network, training, test-time uncertainty and evaluation."""

from .errors import ConfigError, DataError, GraphError, MildNetError, NumericError
from .model import MILDNet, ModelConfig
from .training import TrainConfig, train
from .uncertainty import rts_predict

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "GraphError",
    "MildNetError",
    "NumericError",
    "MILDNet",
    "ModelConfig",
    "TrainConfig",
    "train",
    "rts_predict",
]
