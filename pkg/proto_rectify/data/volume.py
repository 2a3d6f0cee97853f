# Value types for volumes, label masks and dataset splits.
from typing import Any, Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..util import get_basic_logger

logger = get_basic_logger(__name__)

Spacing = tuple[float, float, float]


def check_spatial_shape(shape: tuple[int, ...]) -> None:
    """Raise ValueError unless every spatial dimension is >= 8 and divisible by 4."""
    if len(shape) != 3:
        raise ValueError(f"Expected 3 spatial dimensions, got shape {shape}")
    for axis, size in enumerate(shape):
        if size < 8 or size % 4:
            raise ValueError(f"Spatial size along axis {axis} must be >= 8 and divisible by 4, got {size}")


class Volume(BaseModel):
    """
    A single-channel intensity volume of shape [H, W, D] with physical spacing in mm.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    id: str = ""

    @field_validator("data", mode="after")
    @classmethod
    def valid_data(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        check_spatial_shape(v.shape)
        if not np.issubdtype(v.dtype, np.floating):
            raise ValueError(f"Volume data must be floating point, got {v.dtype}")
        if not np.all(np.isfinite(v)):
            raise ValueError("Volume data contains non-finite values")
        return v

    @field_validator("spacing", mode="after")
    @classmethod
    def valid_spacing(cls, v: Spacing) -> Spacing:
        if any(s <= 0 for s in v):
            raise ValueError(f"Spacing must be strictly positive, got {v}")
        return v

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray, **updates: Any) -> "Volume":
        return Volume(data=data, spacing=updates.get("spacing", self.spacing), id=updates.get("id", self.id))

    def __repr__(self) -> str:
        return f"Volume(id={self.id!r}, shape={self.shape}, spacing={self.spacing})"


class LabelMask(BaseModel):
    """
    Index-coded class labels of shape [H, W, D] with values in {0..C-1}.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    classes: np.ndarray
    num_classes: int = Field(default=2, ge=2)

    @model_validator(mode="after")
    def valid_classes(self) -> Self:
        classes = np.asarray(self.classes)
        if classes.ndim != 3:
            raise ValueError(f"Label mask must be 3D, got shape {classes.shape}")
        if not np.issubdtype(classes.dtype, np.integer):
            raise ValueError(f"Label mask must be integer coded, got {classes.dtype}")
        if classes.size and (classes.min() < 0 or classes.max() >= self.num_classes):
            raise ValueError(f"Label values must lie in [0, {self.num_classes - 1}]")
        return self

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.classes.shape  # type: ignore[return-value]

    @property
    def onehot(self) -> np.ndarray:
        """{0,1} view of shape [C, H, W, D]."""
        return np.moveaxis(np.eye(self.num_classes, dtype=np.uint8)[self.classes], -1, 0)

    @classmethod
    def from_onehot(cls, onehot: np.ndarray) -> "LabelMask":
        if not np.all(onehot.sum(axis=0) == 1):
            raise ValueError("One-hot labels must sum to exactly 1 over the class axis")
        return cls(classes=onehot.argmax(axis=0).astype(np.int64), num_classes=onehot.shape[0])

    def foreground_fraction(self) -> float:
        return float(np.count_nonzero(self.classes) / self.classes.size)

    def __repr__(self) -> str:
        return f"LabelMask(shape={self.shape}, num_classes={self.num_classes})"


class LabelledCase(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    volume: Volume
    label: LabelMask

    @model_validator(mode="after")
    def same_shape(self) -> Self:
        if self.volume.shape != self.label.shape:
            raise ValueError(f"Volume {self.volume.id} shape {self.volume.shape} != label shape {self.label.shape}")
        return self


class DatasetSplit(BaseModel):
    """
    Labelled, unlabelled and validation cases of a semi-supervised run.

    `unlabelled_truth` optionally holds ground truth for the unlabelled volumes. Training never
    reads it; it only feeds pseudo-label quality reporting on synthetic data.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    labelled: list[LabelledCase]
    unlabelled: list[Volume]
    val: list[LabelledCase] = []
    unlabelled_truth: dict[str, LabelMask] = {}

    @model_validator(mode="after")
    def valid_split(self) -> Self:
        if len(self.unlabelled) < len(self.labelled):
            raise ValueError(
                f"Semi-supervised split needs at least as many unlabelled ({len(self.unlabelled)}) "
                f"as labelled ({len(self.labelled)}) volumes"
            )
        seen: set[str] = set()
        for case_id in self.ids():
            if case_id in seen:
                raise ValueError(f"Case id '{case_id}' appears more than once across splits")
            seen.add(case_id)
        return self

    def ids(self) -> list[str]:
        return (
            [case.volume.id for case in self.labelled]
            + [volume.id for volume in self.unlabelled]
            + [case.volume.id for case in self.val]
        )

    @property
    def num_classes(self) -> int:
        if self.labelled:
            return self.labelled[0].label.num_classes
        return 2
