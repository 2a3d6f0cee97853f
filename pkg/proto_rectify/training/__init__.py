"""
Teacher/student training: model pair, moving average, schedule, checkpoints and the loop.
"""

from .checkpoint import Checkpoint, collect_checkpoint, list_checkpoints, load_checkpoint, restore_pair, save_checkpoint
from .ema import ema_update, make_teacher
from .pair import ModelPair
from .schedule import poly_lr, set_lr
from .trainer import (
    StepResult,
    Trainer,
    align_batch,
    interaction_trained,
    rectification_active,
    teacher_targets,
    train_step,
)

__all__ = [
    "Checkpoint",
    "collect_checkpoint",
    "list_checkpoints",
    "load_checkpoint",
    "restore_pair",
    "save_checkpoint",
    "ema_update",
    "make_teacher",
    "ModelPair",
    "poly_lr",
    "set_lr",
    "StepResult",
    "Trainer",
    "align_batch",
    "interaction_trained",
    "rectification_active",
    "teacher_targets",
    "train_step",
]
