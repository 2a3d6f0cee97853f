"""
Weak/strong augmentation and the geometric alignment between the two views.

All operators act on the trailing three (spatial) axes, so the same record replays onto
intensity volumes [H, W, D], label maps [H, W, D] and probability maps [C, H, W, D].
Alignment is pure voxel selection, never interpolation.
"""

from typing import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from ..errors import ConfigurationError, ContractViolation, ShapeMismatchError
from ..settings import AugmentConfig
from ..util import get_basic_logger
from .volume import Volume

logger = get_basic_logger(__name__)

Index3 = tuple[int, int, int]
Box = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


class CutMixRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    box: Box
    """Half-open (start, stop) per axis, in crop coordinates."""
    partner_index: int

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(start, stop) for start, stop in self.box)  # type: ignore[return-value]

    def is_empty(self) -> bool:
        return any(stop <= start for start, stop in self.box)


class AugRecord(BaseModel):
    """
    Everything needed to replay the geometric part of an augmentation.
    """

    model_config = ConfigDict(frozen=True)

    source_shape: Index3
    crop_offset: Index3
    crop_size: Index3
    flips: tuple[bool, bool, bool] = (False, False, False)
    noise_seed: int | None = None
    noise_sigma: float = 0.0
    cutmix: CutMixRecord | None = None

    @model_validator(mode="after")
    def valid_boxes(self) -> Self:
        for axis in range(3):
            if self.crop_offset[axis] < 0 or self.crop_offset[axis] + self.crop_size[axis] > self.source_shape[axis]:
                raise ValueError(
                    f"Crop offset {self.crop_offset} with size {self.crop_size} leaves source {self.source_shape}"
                )
        if self.cutmix is not None:
            for axis, (start, stop) in enumerate(self.cutmix.box):
                if not 0 <= start <= stop <= self.crop_size[axis]:
                    raise ValueError(f"CutMix box {self.cutmix.box} leaves crop {self.crop_size}")
        return self

    def geometry(self) -> "AugRecord":
        """The crop/flip part only."""
        return AugRecord(
            source_shape=self.source_shape, crop_offset=self.crop_offset, crop_size=self.crop_size, flips=self.flips
        )


def sample_geometry(rng: np.random.Generator, source_shape: Index3, crop_size: Index3) -> AugRecord:
    """Random crop offset and flips.

    Raises:
        ConfigurationError: If the crop is larger than the source.
    """
    if any(c > s for c, s in zip(crop_size, source_shape)):
        raise ConfigurationError(f"Crop size {crop_size} is larger than volume {source_shape}")
    offset = tuple(int(rng.integers(0, s - c + 1)) for s, c in zip(source_shape, crop_size))
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    return AugRecord(source_shape=source_shape, crop_offset=offset, crop_size=crop_size, flips=flips)  # type: ignore[arg-type]


def apply_geometry(array: np.ndarray, record: AugRecord) -> np.ndarray:
    """Crop then flip the trailing three axes of `array`."""
    if tuple(array.shape[-3:]) != tuple(record.source_shape):
        raise ShapeMismatchError(f"Array spatial shape {array.shape[-3:]} != record source {record.source_shape}")
    window = tuple(slice(o, o + c) for o, c in zip(record.crop_offset, record.crop_size))
    view = array[(..., *window)]
    axes = tuple(view.ndim - 3 + axis for axis, flip in enumerate(record.flips) if flip)
    if axes:
        view = np.flip(view, axis=axes)
    return np.ascontiguousarray(view)


def noise_field(record: AugRecord) -> np.ndarray:
    if record.noise_seed is None or record.noise_sigma == 0:
        return np.zeros(record.crop_size, dtype=np.float32)
    rng = np.random.default_rng(record.noise_seed)
    return rng.normal(0.0, record.noise_sigma, size=record.crop_size).astype(np.float32)


def sample_cutmix_box(rng: np.random.Generator, crop_size: Index3, box_range: tuple[float, float]) -> Box:
    low, high = box_range
    box = []
    for size in crop_size:
        extent = int(round(rng.uniform(low, high) * size))
        extent = min(max(extent, 1), size)
        start = int(rng.integers(0, size - extent + 1))
        box.append((start, start + extent))
    return tuple(box)  # type: ignore[return-value]


def mix_box(array: np.ndarray, partner: np.ndarray, cutmix: CutMixRecord | None) -> np.ndarray:
    """Replace the box of `array` (trailing axes) with the partner's voxels."""
    if cutmix is None or cutmix.is_empty():
        return array
    if array.shape != partner.shape:
        raise ShapeMismatchError(f"CutMix partner shape {partner.shape} != {array.shape}")
    mixed = array.copy()
    window = (..., *cutmix.slices())
    mixed[window] = partner[window]
    return mixed


def replay(
    array: np.ndarray, record: AugRecord, partner: np.ndarray | None = None, with_noise: bool = False
) -> np.ndarray:
    """
    Replay a record onto any array whose trailing axes match the record's source.

    Args:
        array: Source array (intensities, labels or probability maps).
        record: Augmentation record to replay.
        partner: Partner content already in crop coordinates (required when the record has a CutMix box).
        with_noise: Add the recorded noise field (intensity volumes only).
    """
    view = apply_geometry(array, record)
    if with_noise:
        view = view + noise_field(record)
    if record.cutmix is not None:
        if partner is None:
            raise ContractViolation("Record carries a CutMix box but no partner was given")
        view = mix_box(view, partner, record.cutmix)
    return view


def weak_augment(
    volume: Volume, rng: np.random.Generator, crop_size: Index3 | None = None
) -> tuple[Volume, AugRecord]:
    """
    Random crop plus random flips.

    Raises:
        ConfigurationError: If the crop is larger than the volume.
    """
    crop_size = tuple(crop_size or AugmentConfig().crop_size)  # type: ignore[assignment]
    record = sample_geometry(rng, volume.shape, crop_size)
    return volume.with_data(apply_geometry(volume.data, record)), record


def strong_augment(
    volume: Volume,
    partner: Volume | None,
    rng: np.random.Generator,
    config: AugmentConfig | None = None,
    geometry: AugRecord | None = None,
    partner_index: int = 1,
) -> tuple[Volume, AugRecord]:
    """
    Crop/flip, additive Gaussian noise, then CutMix with `partner`.

    Args:
        volume: Source volume.
        partner: CutMix partner content, already in crop coordinates (None disables CutMix).
        rng: Random generator.
        config: Augmentation settings (noise_sigma, cutmix_prob, cutmix_box_range, crop_size).
        geometry: Crop/flip to reuse (the weak view's record); sampled when omitted.
        partner_index: Batch index of the partner, stored in the record.

    Raises:
        ShapeMismatchError: If the partner does not match the crop shape.
    """
    config = config or AugmentConfig()
    record = geometry.geometry() if geometry is not None else sample_geometry(rng, volume.shape, config.crop_size)
    if partner is not None and tuple(partner.shape) != tuple(record.crop_size):
        raise ShapeMismatchError(f"Partner shape {partner.shape} != crop size {record.crop_size}")

    updates: dict = {}
    if config.use_strong and config.noise_sigma > 0:
        updates["noise_seed"] = int(rng.integers(0, 2**31 - 1))
        updates["noise_sigma"] = config.noise_sigma
    if config.use_strong and partner is not None and rng.random() < config.cutmix_prob:
        box = sample_cutmix_box(rng, record.crop_size, config.cutmix_box_range)
        updates["cutmix"] = CutMixRecord(box=box, partner_index=partner_index)
    record = record.model_copy(update=updates)

    data = replay(volume.data, record, partner.data if partner is not None else None, with_noise=True)
    return volume.with_data(data.astype(np.float32)), record


def _axis_map(weak: AugRecord, strong: AugRecord, axis: int) -> np.ndarray:
    """Index into the weak view for every strong-view position along one axis."""
    size = strong.crop_size[axis]
    local = np.arange(size)
    if strong.flips[axis]:
        local = size - 1 - local
    weak_local = strong.crop_offset[axis] + local - weak.crop_offset[axis]
    if weak_local.min() < 0 or weak_local.max() >= weak.crop_size[axis]:
        raise ContractViolation(f"Strong view is not covered by the weak view along axis {axis}")
    if weak.flips[axis]:
        weak_local = weak.crop_size[axis] - 1 - weak_local
    return weak_local


def map_weak_to_strong(prediction: np.ndarray, rec_weak: AugRecord, rec_strong: AugRecord) -> np.ndarray:
    """Re-index a weak-view map into the strong view's crop/flip frame."""
    if rec_weak.source_shape != rec_strong.source_shape:
        raise ContractViolation("Weak and strong records refer to different source volumes")
    if tuple(prediction.shape[-3:]) != tuple(rec_weak.crop_size):
        raise ShapeMismatchError(f"Prediction shape {prediction.shape[-3:]} != weak crop {rec_weak.crop_size}")
    index = np.ix_(*(_axis_map(rec_weak, rec_strong, axis) for axis in range(3)))
    return np.ascontiguousarray(prediction[(..., *index)])


def align_teacher_prediction(
    p_teacher: np.ndarray,
    rec_weak: AugRecord,
    rec_strong: AugRecord,
    p_teacher_partner: np.ndarray | None = None,
    partner_records: tuple[AugRecord, AugRecord] | None = None,
) -> np.ndarray:
    """
    Map a teacher probability map from the weak view into the strong view.

    Inside the strong record's CutMix box the pseudo-label comes from the partner's teacher
    prediction, aligned through `partner_records` (weak, strong) when given, otherwise assumed
    to be in crop coordinates already.

    Raises:
        ContractViolation: If the crops do not share support or a CutMix partner is missing.
    """
    aligned = map_weak_to_strong(p_teacher, rec_weak, rec_strong)
    if rec_strong.cutmix is None or rec_strong.cutmix.is_empty():
        return aligned
    if p_teacher_partner is None:
        raise ContractViolation("Strong view was CutMixed but no partner prediction was given")
    partner = p_teacher_partner
    if partner_records is not None:
        partner = map_weak_to_strong(p_teacher_partner, *partner_records)
    return mix_box(aligned, partner, rec_strong.cutmix)
