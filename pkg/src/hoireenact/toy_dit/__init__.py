"""Toy diffusion transformer: model, rectified-flow objective, trainer and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .flow import Conditioning, build_conditioning, model_velocity, rf_loss, sample
from .model import ModelConfig, ParamReport, ToyDiT, param_report
from .train import TrainConfig, TrainState, make_optimizer, train

__all__ = [
    "Conditioning",
    "ModelConfig",
    "ParamReport",
    "ToyDiT",
    "TrainConfig",
    "TrainState",
    "build_conditioning",
    "load_checkpoint",
    "make_optimizer",
    "model_velocity",
    "param_report",
    "rf_loss",
    "sample",
    "save_checkpoint",
    "train",
]
