"""Optimization, checkpoints and the toy dataset."""
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_model, save_checkpoint
from .optim import AdamW, NonFiniteGradientError
from .schedule import lr_at, warmup_steps
from .toy import make_toy_dataset, toy_case
from .trainer import NonFiniteLossError, TrainConfig, TrainResult, run_cross_validation, train, validate

__all__ = [
    "AdamW",
    "Checkpoint",
    "CheckpointError",
    "NonFiniteGradientError",
    "NonFiniteLossError",
    "TrainConfig",
    "TrainResult",
    "load_checkpoint",
    "load_model",
    "lr_at",
    "make_toy_dataset",
    "run_cross_validation",
    "save_checkpoint",
    "toy_case",
    "train",
    "validate",
    "warmup_steps",
]
