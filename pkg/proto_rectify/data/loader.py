"""
Training batch assembly and background prefetching.

A batch is a pure function of (seed, iteration), so prefetch workers never change what the
training loop sees.
"""

from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from ..settings import ExperimentSettings
from ..util import get_basic_logger
from .augment import AugRecord, apply_geometry, replay, strong_augment, weak_augment
from .volume import DatasetSplit

logger = get_basic_logger(__name__)


@dataclass(frozen=True)
class TrainBatch:
    """One training batch (immutable once built)."""

    iteration: int

    labelled_images: np.ndarray
    """[L, 1, h, w, d] float32, weak (crop/flip) views."""

    labelled_labels: np.ndarray
    """[L, h, w, d] int64."""

    weak_images: np.ndarray
    """[U, 1, h, w, d] unlabelled weak views (teacher input)."""

    strong_images: np.ndarray
    """[U, 1, h, w, d] unlabelled strong views (student input)."""

    weak_records: list[AugRecord] = field(default_factory=list)
    strong_records: list[AugRecord] = field(default_factory=list)
    labelled_ids: list[str] = field(default_factory=list)
    unlabelled_ids: list[str] = field(default_factory=list)

    strong_truth: np.ndarray | None = None
    """[U, h, w, d] ground truth replayed onto the strong views (synthetic data only)."""

    @property
    def partner_of(self) -> list[int]:
        return [index ^ 1 for index in range(len(self.unlabelled_ids))]


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration, 0x5EED])


def sample_batch(split: DatasetSplit, iteration: int, settings: ExperimentSettings) -> TrainBatch:
    """
    Build the batch for `iteration`: labelled weak views, unlabelled weak/strong pairs.

    Strong views reuse the crop and flips of their weak view; unlabelled cases are paired
    (0, 1), (2, 3), ... and each CutMixes in its partner's weak view.
    """
    rng = batch_rng(settings.seed, iteration)
    augment = settings.augment
    crop = tuple(augment.crop_size)
    n_l, n_u = settings.train.labelled_batch, settings.train.unlabelled_batch

    labelled_index = rng.choice(len(split.labelled), size=n_l, replace=len(split.labelled) < n_l)
    unlabelled_index = rng.choice(len(split.unlabelled), size=n_u, replace=len(split.unlabelled) < n_u)

    labelled_images, labelled_labels, labelled_ids = [], [], []
    for index in labelled_index:
        case = split.labelled[int(index)]
        view, record = weak_augment(case.volume, rng, crop)  # type: ignore[arg-type]
        labelled_images.append(view.data)
        labelled_labels.append(apply_geometry(case.label.classes, record))
        labelled_ids.append(case.volume.id)

    volumes = [split.unlabelled[int(index)] for index in unlabelled_index]
    weak = [weak_augment(v, rng, crop) for v in volumes]  # type: ignore[arg-type]
    weak_views = [view for view, _ in weak]
    weak_records = [record for _, record in weak]

    strong = [
        strong_augment(
            volume, weak_views[index ^ 1], rng, augment, geometry=weak_records[index], partner_index=index ^ 1
        )
        for index, volume in enumerate(volumes)
    ]
    strong_records = [record for _, record in strong]

    strong_truth = None
    if split.unlabelled_truth and all(v.id in split.unlabelled_truth for v in volumes):
        truths = [apply_geometry(split.unlabelled_truth[v.id].classes, r) for v, r in zip(volumes, weak_records)]
        strong_truth = np.stack(
            [
                replay(split.unlabelled_truth[v.id].classes, record, truths[index ^ 1])
                for index, (v, record) in enumerate(zip(volumes, strong_records))
            ]
        ).astype(np.int64)

    return TrainBatch(
        iteration=iteration,
        labelled_images=np.stack(labelled_images)[:, None].astype(np.float32),
        labelled_labels=np.stack(labelled_labels).astype(np.int64),
        weak_images=np.stack([view.data for view in weak_views])[:, None].astype(np.float32),
        strong_images=np.stack([view.data for view, _ in strong])[:, None].astype(np.float32),
        weak_records=weak_records,
        strong_records=strong_records,
        labelled_ids=labelled_ids,
        unlabelled_ids=[v.id for v in volumes],
        strong_truth=strong_truth,
    )


class BatchPrefetcher:
    """
    Iterate batches for iterations [start, stop) using a pool of worker threads.

    At most `depth` batches are in flight; batches are yielded strictly in iteration order.
    With `workers=0` batches are built inline.
    """

    def __init__(
        self,
        split: DatasetSplit,
        settings: ExperimentSettings,
        start: int,
        stop: int,
        workers: int | None = None,
        depth: int | None = None,
    ):
        self.split = split
        self.settings = settings
        self.start = start
        self.stop = stop
        self.workers = settings.train.prefetch_workers if workers is None else workers
        self.depth = max(1, settings.train.prefetch_depth if depth is None else depth)

    def __iter__(self) -> Iterator[TrainBatch]:
        if self.workers == 0:
            for iteration in range(self.start, self.stop):
                yield sample_batch(self.split, iteration, self.settings)
            return

        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="prefetch") as pool:
            pending: deque[Future[TrainBatch]] = deque()
            next_iteration = self.start
            while next_iteration < self.stop or pending:
                while next_iteration < self.stop and len(pending) < self.depth:
                    pending.append(pool.submit(sample_batch, self.split, next_iteration, self.settings))
                    next_iteration += 1
                yield pending.popleft().result()
            logger.debug("Prefetcher drained iterations [%d, %d)", self.start, self.stop)
