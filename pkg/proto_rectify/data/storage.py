"""
On-disk format for volumes and label masks.

A volume `<name>` is stored as `<name>.f32raw` (little-endian row-major buffer) next to
`<name>.manifest`, a JSON document with keys dims, spacing, dtype and order. Label masks use
the same layout with dtype=uint8 and the `.u8raw` suffix.
"""

import json
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from ..errors import CorruptFileError, DataError
from ..util import get_basic_logger
from .volume import DatasetSplit, LabelledCase, LabelMask, Volume

logger = get_basic_logger(__name__)

_DTYPES: dict[str, np.dtype] = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
}
_SUFFIXES = {"float32": ".f32raw", "uint8": ".u8raw"}
MANIFEST_SUFFIX = ".manifest"
LABEL_TAG = "_label"


class VolumeManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dtype: Literal["float32", "uint8"] = "float32"
    order: Literal["row-major"] = "row-major"
    id: str = ""
    num_classes: int | None = None


def _paths(path: str | Path, dtype: str) -> tuple[Path, Path]:
    base = Path(path)
    for suffix in (*_SUFFIXES.values(), MANIFEST_SUFFIX):
        if base.name.endswith(suffix):
            base = base.with_name(base.name[: -len(suffix)])
    return base.with_name(base.name + _SUFFIXES[dtype]), base.with_name(base.name + MANIFEST_SUFFIX)


def _write(path: str | Path, array: np.ndarray, manifest: VolumeManifest) -> Path:
    raw_path, manifest_path = _paths(path, manifest.dtype)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(np.ascontiguousarray(array, dtype=_DTYPES[manifest.dtype]).tobytes(order="C"))
    manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.debug("Wrote %s (%s, dims=%s)", raw_path, manifest.dtype, manifest.dims)
    return raw_path


def _read(path: str | Path, dtype: str) -> tuple[np.ndarray, VolumeManifest]:
    raw_path, manifest_path = _paths(path, dtype)
    if not manifest_path.is_file() or not raw_path.is_file():
        raise DataError(f"Missing volume files for {raw_path.with_suffix('')}")
    try:
        manifest = VolumeManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CorruptFileError(f"Unreadable manifest {manifest_path}: {e.errors()[0]['msg']}") from e
    if manifest.dtype != dtype:
        raise CorruptFileError(f"{manifest_path} declares dtype {manifest.dtype}, expected {dtype}")

    buffer = raw_path.read_bytes()
    expected = int(np.prod(manifest.dims)) * _DTYPES[dtype].itemsize
    if len(buffer) != expected:
        raise CorruptFileError(f"{raw_path} holds {len(buffer)} bytes but manifest dims {manifest.dims} need {expected}")
    array = np.frombuffer(buffer, dtype=_DTYPES[dtype]).reshape(manifest.dims).copy()
    return array, manifest


def save_volume(volume: Volume, path: str | Path) -> Path:
    manifest = VolumeManifest(dims=volume.shape, spacing=volume.spacing, dtype="float32", id=volume.id)
    return _write(path, volume.data, manifest)


def load_volume(path: str | Path) -> Volume:
    """
    Load a volume written by `save_volume`.

    Raises:
        DataError: If either file is missing.
        CorruptFileError: If the buffer size disagrees with the manifest.
    """
    array, manifest = _read(path, "float32")
    try:
        return Volume(data=array.astype(np.float32), spacing=manifest.spacing, id=manifest.id)
    except ValidationError as e:
        raise CorruptFileError(f"Invalid volume in {path}: {e.errors()[0]['msg']}") from e


def save_label(label: LabelMask, path: str | Path, spacing=(1.0, 1.0, 1.0), case_id: str = "") -> Path:
    manifest = VolumeManifest(
        dims=label.shape, spacing=spacing, dtype="uint8", id=case_id, num_classes=label.num_classes
    )
    return _write(path, label.classes, manifest)


def load_label(path: str | Path) -> LabelMask:
    array, manifest = _read(path, "uint8")
    num_classes = manifest.num_classes or int(array.max()) + 1
    try:
        return LabelMask(classes=array, num_classes=max(num_classes, 2))
    except ValidationError as e:
        raise CorruptFileError(f"Invalid label mask in {path}: {e.errors()[0]['msg']}") from e


class SplitIndex(BaseModel):
    labelled: list[str]
    unlabelled: list[str]
    val: list[str]


def save_split(split: DatasetSplit, directory: str | Path) -> Path:
    """
    Write every case of a split plus an `index.json` listing ids per subset.

    Unlabelled ground truth (synthetic data only) is written alongside so reports can use it.
    """
    directory = Path(directory)
    for case in [*split.labelled, *split.val]:
        save_volume(case.volume, directory / case.volume.id)
        save_label(case.label, directory / f"{case.volume.id}{LABEL_TAG}", case.volume.spacing, case.volume.id)
    for volume in split.unlabelled:
        save_volume(volume, directory / volume.id)
        truth = split.unlabelled_truth.get(volume.id)
        if truth is not None:
            save_label(truth, directory / f"{volume.id}{LABEL_TAG}", volume.spacing, volume.id)
    index = SplitIndex(
        labelled=[c.volume.id for c in split.labelled],
        unlabelled=[v.id for v in split.unlabelled],
        val=[c.volume.id for c in split.val],
    )
    index_path = directory / "index.json"
    index_path.write_text(index.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Saved split (%d cases) to %s", len(split.ids()), directory)
    return index_path


def load_split(directory: str | Path) -> DatasetSplit:
    """
    Load a split written by `save_split`.

    Raises:
        DataError: If the directory has no readable index.
    """
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise DataError(f"No index.json in data directory {directory}")
    try:
        index = SplitIndex.model_validate(json.loads(index_path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise CorruptFileError(f"Unreadable split index {index_path}") from e

    def labelled(case_id: str) -> LabelledCase:
        return LabelledCase(volume=load_volume(directory / case_id), label=load_label(directory / f"{case_id}{LABEL_TAG}"))

    truth = {}
    for case_id in index.unlabelled:
        raw_path, _ = _paths(directory / f"{case_id}{LABEL_TAG}", "uint8")
        if raw_path.is_file():
            truth[case_id] = load_label(directory / f"{case_id}{LABEL_TAG}")
    try:
        return DatasetSplit(
            labelled=[labelled(i) for i in index.labelled],
            unlabelled=[load_volume(directory / i) for i in index.unlabelled],
            val=[labelled(i) for i in index.val],
            unlabelled_truth=truth,
        )
    except ValidationError as e:
        raise DataError(f"Inconsistent split in {directory}: {e.errors()[0]['msg']}") from e
