"""Training loops, file formats, checkpoints and the command-line interface."""

from .config import ConfigError, ExperimentConfig, TrainConfig, config_from_dict, load_config
from .formats import DataError
from .train import NumericError, finetune, lr_schedule, pretrain

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "ExperimentConfig",
    "TrainConfig",
    "config_from_dict",
    "finetune",
    "load_config",
    "lr_schedule",
    "pretrain",
]
