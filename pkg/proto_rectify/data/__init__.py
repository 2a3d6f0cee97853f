"""
Volumes, label masks, synthetic data, file I/O and augmentation.
"""

from .augment import AugRecord, align_teacher_prediction, replay, strong_augment, weak_augment
from .storage import load_label, load_split, load_volume, save_label, save_split, save_volume
from .synthetic import generate_synthetic_dataset
from .volume import DatasetSplit, LabelledCase, LabelMask, Volume

__all__ = [
    "AugRecord",
    "DatasetSplit",
    "LabelledCase",
    "LabelMask",
    "Volume",
    "align_teacher_prediction",
    "generate_synthetic_dataset",
    "load_label",
    "load_split",
    "load_volume",
    "replay",
    "save_label",
    "save_split",
    "save_volume",
    "strong_augment",
    "weak_augment",
]
