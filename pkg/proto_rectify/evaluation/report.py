"""
Per-case scoring, summaries, and before/after rectification curves over checkpoints.
"""

import math
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel

from ..data.volume import DatasetSplit, LabelledCase, LabelMask, Volume
from ..errors import ConfigurationError, DataError
from ..util import get_basic_logger
from . import metrics
from .inference import Predictor, network_predictor, sliding_window_predict

logger = get_basic_logger(__name__)

METRIC_NAMES = ("dice", "jaccard", "asd", "hd95")


class CaseScore(BaseModel):
    id: str
    dice: float
    jaccard: float
    asd: float
    hd95: float


class MetricSummary(BaseModel):
    mean: float
    std: float
    count: int


class RectificationRecord(BaseModel):
    iteration: int
    mu: float
    reliable_before: float
    reliable_after: float
    dice_before: float
    dice_after: float


def _nanmean(values: list[float]) -> float:
    finite = [v for v in values if not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


def score_prediction(
    case_id: str,
    probabilities: np.ndarray,
    truth: LabelMask,
    spacing: Sequence[float] | None = None,
) -> CaseScore:
    """
    Score the argmax of a probability map [C, H, W, D] against ground truth.

    Metrics are averaged over foreground classes. Distances are in voxels unless `spacing` is given.
    """
    hard = probabilities.argmax(axis=0)
    spacing = tuple(spacing) if spacing is not None else (1.0, 1.0, 1.0)
    per_class: dict[str, list[float]] = {name: [] for name in METRIC_NAMES}
    for c in range(1, truth.num_classes):
        a, b = hard == c, truth.classes == c
        per_class["dice"].append(metrics.dice(a, b))
        per_class["jaccard"].append(metrics.jaccard(a, b))
        per_class["asd"].append(metrics.asd(a, b, spacing))
        per_class["hd95"].append(metrics.hd95(a, b, spacing))
    return CaseScore(id=case_id, **{name: _nanmean(values) for name, values in per_class.items()})


def score_cases(
    predict: Predictor,
    cases: Sequence[LabelledCase],
    window: Sequence[int],
    strides: Sequence[int],
    use_spacing: bool = False,
) -> list[CaseScore]:
    """Sliding-window prediction and scoring of every case."""
    scores = []
    for case in cases:
        probabilities = sliding_window_predict(predict, case.volume, window, strides)
        spacing = case.volume.spacing if use_spacing else None
        scores.append(score_prediction(case.volume.id, probabilities, case.label, spacing))
    return scores


def summarize(scores: Sequence[CaseScore]) -> dict[str, MetricSummary]:
    """Mean and standard deviation per metric; undefined (NaN) values are excluded with a warning."""
    summary = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(score, name) for score in scores], dtype=np.float64)
        finite = values[~np.isnan(values)]
        if len(finite) < len(values):
            logger.warning("Excluding %d undefined %s value(s) from the summary", len(values) - len(finite), name)
        summary[name] = MetricSummary(
            mean=float(finite.mean()) if len(finite) else math.nan,
            std=float(finite.std()) if len(finite) else math.nan,
            count=len(finite),
        )
    return summary


def bootstrap_summary(scores: Sequence[CaseScore], resamples: int = 100, seed: int = 0) -> dict[str, MetricSummary]:
    """Mean and standard deviation of the case-mean over bootstrap resamples of the cases."""
    if not scores:
        raise DataError("Cannot bootstrap an empty score list")
    rng = np.random.default_rng(seed)
    summary = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(score, name) for score in scores], dtype=np.float64)
        finite = values[~np.isnan(values)]
        if not len(finite):
            summary[name] = MetricSummary(mean=math.nan, std=math.nan, count=0)
            continue
        means = np.array([rng.choice(finite, size=len(finite), replace=True).mean() for _ in range(resamples)])
        summary[name] = MetricSummary(mean=float(means.mean()), std=float(means.std()), count=len(finite))
    return summary


def _pseudo_label_quality(probabilities: np.ndarray, truth: LabelMask, tau: float) -> tuple[float, float]:
    reliable = float((probabilities.max(axis=0) >= tau).mean())
    quality = score_prediction("", probabilities, truth).dice
    return reliable, quality


def rectification_report(
    checkpoint_dirs: Sequence[str | Path],
    split: DatasetSplit,
    window: Sequence[int] | None = None,
    strides: Sequence[int] | None = None,
    max_cases: int = 8,
) -> list[RectificationRecord]:
    """
    Reliable-voxel fraction and pseudo-label Dice of teacher predictions on unlabelled cases,
    before and after rectification, for each checkpoint.

    Raises:
        DataError: If no unlabelled case has ground truth.
    """
    from ..training.checkpoint import load_checkpoint, restore_pair

    cases: list[tuple[Volume, LabelMask]] = [
        (v, split.unlabelled_truth[v.id]) for v in split.unlabelled if v.id in split.unlabelled_truth
    ][:max_cases]
    if not cases:
        raise DataError("Rectification report needs ground truth for unlabelled cases")

    records = []
    for directory in checkpoint_dirs:
        checkpoint = load_checkpoint(directory)
        pair = restore_pair(checkpoint)
        settings = pair.settings
        window = tuple(window or settings.augment.crop_size)
        strides = tuple(strides or settings.train.eval_strides)
        tau = settings.train.tau
        plain = network_predictor(pair.teacher)
        rectified = network_predictor(pair.teacher, pair.rectifier)

        before, after = [], []
        for volume, truth in cases:
            before.append(_pseudo_label_quality(sliding_window_predict(plain, volume, window, strides), truth, tau))
            after.append(_pseudo_label_quality(sliding_window_predict(rectified, volume, window, strides), truth, tau))
        record = RectificationRecord(
            iteration=checkpoint.iteration,
            mu=pair.mu(),
            reliable_before=float(np.mean([r for r, _ in before])),
            reliable_after=float(np.mean([r for r, _ in after])),
            dice_before=_nanmean([d for _, d in before]),
            dice_after=_nanmean([d for _, d in after]),
        )
        logger.info("Iteration %d: %s", record.iteration, record.model_dump())
        records.append(record)
    return records


def plot_rectification_report(records: Sequence[RectificationRecord], path: str | Path) -> Path:
    """
    Write before/after curves to an image file.

    Raises:
        ConfigurationError: If matplotlib is not installed (install the `plot` extra).
    """
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as e:
        raise ConfigurationError("Plotting needs matplotlib; install the 'plot' extra") from e

    iterations = [r.iteration for r in records]
    figure, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    left.plot(iterations, [r.reliable_before for r in records], marker="o", label="before")
    left.plot(iterations, [r.reliable_after for r in records], marker="o", label="after")
    left.set_title("Reliable voxel fraction")
    right.plot(iterations, [r.dice_before for r in records], marker="o", label="before")
    right.plot(iterations, [r.dice_after for r in records], marker="o", label="after")
    right.set_title("Pseudo-label Dice")
    for axis in (left, right):
        axis.set_xlabel("iteration")
        axis.legend()
    figure.tight_layout()
    path = Path(path)
    figure.savefig(path)
    plt.close(figure)
    return path
