"""
Checkpoint archive: `checkpoint.npz` (named float32 arrays) plus a `checkpoint.json` manifest.
"""

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from ..errors import CorruptFileError, DataError
from ..settings import ExperimentSettings, build_settings
from ..util import get_basic_logger
from .pair import ModelPair

logger = get_basic_logger(__name__)

ARCHIVE_NAME = "checkpoint.npz"
MANIFEST_NAME = "checkpoint.json"


class CheckpointManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iteration: int
    config_hash: str
    num_classes: int
    num_prototypes: int
    feature_dim: int
    mu: float
    names: list[str]
    settings: dict[str, Any]


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    manifest: CheckpointManifest

    @property
    def iteration(self) -> int:
        return self.manifest.iteration

    def settings(self) -> ExperimentSettings:
        return build_settings(self.manifest.settings)


def collect_checkpoint(pair: ModelPair, iteration: int) -> Checkpoint:
    arrays = pair.state_arrays()
    settings = pair.settings
    manifest = CheckpointManifest(
        iteration=iteration,
        config_hash=settings.config_hash(),
        num_classes=settings.num_classes,
        num_prototypes=settings.model.num_prototypes,
        feature_dim=settings.model.feature_dim,
        mu=pair.mu(),
        names=sorted(arrays),
        settings=settings.model_dump(mode="json"),
    )
    return Checkpoint(arrays=arrays, manifest=manifest)


def save_checkpoint(checkpoint: Checkpoint, directory: str | Path) -> Path:
    """
    Write a checkpoint directory.

    Raises:
        CorruptFileError: If the array names disagree with the manifest.
    """
    if sorted(checkpoint.arrays) != checkpoint.manifest.names:
        raise CorruptFileError("Checkpoint arrays and manifest names disagree")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.savez(directory / ARCHIVE_NAME, **{name: checkpoint.arrays[name] for name in checkpoint.manifest.names})
    (directory / MANIFEST_NAME).write_text(checkpoint.manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Saved checkpoint for iteration %d to %s", checkpoint.iteration, directory)
    return directory


def load_checkpoint(directory: str | Path) -> Checkpoint:
    """
    Read a checkpoint directory written by `save_checkpoint`.

    Raises:
        DataError: If the directory has no checkpoint.
        CorruptFileError: If the archive or manifest is unreadable or they disagree.
    """
    directory = Path(directory)
    archive, manifest_path = directory / ARCHIVE_NAME, directory / MANIFEST_NAME
    if not archive.is_file() or not manifest_path.is_file():
        raise DataError(f"No checkpoint in {directory}")
    try:
        manifest = CheckpointManifest.model_validate(json.loads(manifest_path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise CorruptFileError(f"Unreadable checkpoint manifest {manifest_path}") from e
    try:
        with np.load(archive, allow_pickle=False) as data:
            arrays = {name: data[name] for name in data.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as e:
        raise CorruptFileError(f"Unreadable checkpoint archive {archive}: {e}") from e
    if sorted(arrays) != manifest.names:
        raise CorruptFileError(f"Checkpoint archive {archive} does not match its manifest")
    return Checkpoint(arrays=arrays, manifest=manifest)


def restore_pair(checkpoint: Checkpoint, settings: ExperimentSettings | None = None) -> ModelPair:
    """Build a model pair from a checkpoint's own settings (or `settings`) and load its state."""
    pair = ModelPair(settings or checkpoint.settings())
    pair.load_arrays(checkpoint.arrays)
    return pair


def list_checkpoints(directory: str | Path) -> list[Path]:
    """Checkpoint directories below `directory`, ordered by iteration."""
    found = []
    for manifest_path in Path(directory).rglob(MANIFEST_NAME):
        try:
            iteration = json.loads(manifest_path.read_text(encoding="utf-8"))["iteration"]
        except (json.JSONDecodeError, KeyError) as e:
            raise CorruptFileError(f"Unreadable checkpoint manifest {manifest_path}") from e
        found.append((iteration, str(manifest_path.parent)))
    return [Path(path) for _, path in sorted(found)]
