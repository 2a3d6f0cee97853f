"""
Whole-volume inference by overlapping windows.
"""

from typing import Callable, Sequence

import numpy as np
import torch

from ..data.volume import Volume
from ..errors import ConfigurationError
from ..model import SegmentationNetwork
from ..model.rectification import Rectifier

Predictor = Callable[[torch.Tensor], torch.Tensor]
"""Maps a window [1, 1, h, w, d] to class probabilities [1, C, h, w, d]."""


def window_starts(size: int, window: int, stride: int) -> list[int]:
    """Start offsets along one axis; the last window is clamped to the border."""
    if window > size:
        raise ConfigurationError(f"Window {window} is larger than the volume extent {size}")
    if stride < 1:
        raise ConfigurationError(f"Stride must be positive, got {stride}")
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] + window < size:
        starts.append(size - window)
    return starts


def sliding_window_predict(
    predict: Predictor,
    volume: Volume | np.ndarray,
    window: Sequence[int],
    strides: Sequence[int],
) -> np.ndarray:
    """
    Average overlapping window probabilities over the whole volume.

    Args:
        predict: Window predictor.
        volume: Volume (or raw [H, W, D] array).
        window: Window size per axis.
        strides: Step between window starts per axis.

    Returns:
        Probability map [C, H, W, D] (float32), renormalised per voxel.

    Raises:
        ConfigurationError: If the window exceeds the volume.
    """
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float32)
    shape = data.shape
    starts = [window_starts(size, w, s) for size, w, s in zip(shape, window, strides)]

    total: np.ndarray | None = None
    counts = np.zeros(shape, dtype=np.float64)
    for i in starts[0]:
        for j in starts[1]:
            for k in starts[2]:
                box = (slice(i, i + window[0]), slice(j, j + window[1]), slice(k, k + window[2]))
                tile = torch.from_numpy(np.ascontiguousarray(data[box], dtype=np.float32))[None, None]
                with torch.no_grad():
                    probabilities = predict(tile)[0].double().cpu().numpy()
                if total is None:
                    total = np.zeros((probabilities.shape[0], *shape), dtype=np.float64)
                total[(slice(None), *box)] += probabilities
                counts[box] += 1
    assert total is not None
    averaged = total / counts
    return (averaged / averaged.sum(axis=0, keepdims=True)).astype(np.float32)


def network_predictor(network: SegmentationNetwork, rectifier: Rectifier | None = None) -> Predictor:
    """Softmax predictor of a network, optionally rectified with its relationship map."""

    def predict(x: torch.Tensor) -> torch.Tensor:
        pyramid = network(x)
        probabilities = pyramid.probabilities
        if rectifier is None:
            return probabilities
        return rectifier(probabilities, network.relationship_map(pyramid))

    return predict
