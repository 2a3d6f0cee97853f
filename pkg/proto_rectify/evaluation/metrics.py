"""
Overlap and surface-distance metrics for binary masks.

Surfaces are 6-connected boundaries (a foreground voxel with a background face neighbour,
the outside of the array counting as background). Distances are Euclidean, scaled by the
voxel spacing. hd95 uses the linear-interpolation percentile.
"""

import math
from typing import Sequence

import numpy as np
from scipy import ndimage

from ..errors import ShapeMismatchError
from ..util import get_basic_logger

logger = get_basic_logger(__name__)

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"Mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|a∩b| / (|a| + |b|); two empty masks score 1."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2 * int((a & b).sum()) / total


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    """|a∩b| / |a∪b|; two empty masks score 1."""
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def surface(mask: np.ndarray) -> np.ndarray:
    """Boolean mask of boundary voxels."""
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE_NEIGHBOURS, border_value=0)


def directed_distances(a: np.ndarray, b: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance from every surface voxel of `a` to the nearest surface voxel of `b`."""
    a_surface, b_surface = surface(a), surface(b)
    field = ndimage.distance_transform_edt(~b_surface, sampling=tuple(float(s) for s in spacing))
    return field[a_surface]


def _symmetric(a: np.ndarray, b: np.ndarray, spacing: Sequence[float]) -> tuple[np.ndarray, np.ndarray] | None:
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        logger.warning("Surface distance undefined for an empty mask; reporting NaN")
        return None
    return directed_distances(a, b, spacing), directed_distances(b, a, spacing)


def asd(a: np.ndarray, b: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance: mean of the two directed mean distances (NaN if a mask is empty)."""
    distances = _symmetric(a, b, spacing)
    if distances is None:
        return math.nan
    forward, backward = distances
    return float((forward.mean() + backward.mean()) / 2)


def hd95(a: np.ndarray, b: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """95th percentile of the pooled directed distances (NaN if a mask is empty)."""
    distances = _symmetric(a, b, spacing)
    if distances is None:
        return math.nan
    return float(np.percentile(np.concatenate(distances), 95))


def hausdorff(a: np.ndarray, b: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    distances = _symmetric(a, b, spacing)
    if distances is None:
        return math.nan
    return float(max(d.max() for d in distances))
