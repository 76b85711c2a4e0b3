from .augment import AugmentConfig, augment
from .loss import dice_loss, dice_loss_grad, dice_loss_numpy
from .model import SegModel, SegModelConfig, build_model
from .train import (
    PlateauScheduler,
    TrainConfig,
    load_checkpoint,
    predict_probs,
    save_checkpoint,
    train_phase,
    train_two_phase,
)

__all__ = [
    "AugmentConfig",
    "augment",
    "dice_loss",
    "dice_loss_grad",
    "dice_loss_numpy",
    "SegModel",
    "SegModelConfig",
    "build_model",
    "PlateauScheduler",
    "TrainConfig",
    "load_checkpoint",
    "predict_probs",
    "save_checkpoint",
    "train_phase",
    "train_two_phase",
]
