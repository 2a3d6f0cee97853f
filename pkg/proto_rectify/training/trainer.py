"""
The teacher/student training loop.

One iteration, in order: teacher inference on the weak views (rectified once the rectification
stage has started), the student's main update, the correction-coefficient update with
everything else frozen, and the teacher's moving-average update.
"""

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..data.augment import align_teacher_prediction
from ..data.loader import BatchPrefetcher, TrainBatch
from ..data.volume import DatasetSplit
from ..errors import ConfigurationError, NumericalError
from ..evaluation.inference import network_predictor
from ..evaluation.metrics import dice
from ..evaluation.report import score_cases, summarize
from ..model import build_contrastive_batch, cps_loss, mu_loss, reliable_fraction, sample_xi
from ..model.losses import supervised_loss, unsupervised_loss
from ..settings import ExperimentSettings
from ..util import append_jsonl, get_basic_logger, seed_everything
from .checkpoint import Checkpoint, collect_checkpoint, load_checkpoint, restore_pair, save_checkpoint
from .pair import ModelPair
from .schedule import poly_lr, set_lr

logger = get_basic_logger(__name__)

METRICS_NAME = "metrics.jsonl"
FINAL_CHECKPOINT = "checkpoint"
CHECKPOINTS_DIR = "checkpoints"


@dataclass
class StepResult:
    iteration: int
    lr: float
    loss_total: float
    loss_sup: float
    loss_dim: float | None
    loss_unsup: float
    loss_cps: float | None
    loss_mu: float | None
    mu: float
    rectified: bool
    reliable_before: float
    reliable_after: float
    pseudo_dice_before: float | None = None
    pseudo_dice_after: float | None = None
    teacher_grad_norm: float = 0.0

    def record(self) -> dict:
        return {"kind": "train", **asdict(self)}


def step_generator(seed: int, iteration: int) -> torch.Generator:
    """Torch generator for the per-iteration sampling decisions (anchors, negatives, ξ)."""
    generator = torch.Generator()
    generator.manual_seed(seed * 1_000_003 + iteration)
    return generator


def rectification_active(settings: ExperimentSettings, iteration: int) -> bool:
    start = settings.rectify.start_iter
    return settings.rectify.enabled and start is not None and iteration > start


def interaction_trained(pair: ModelPair) -> bool:
    """
    Whether the interaction module can ever change a pseudo-label. Its loss term and the
    coefficient step only run when it can; an identity rectifier (μ fixed at 1) or a
    missing start iteration means it never will.
    """
    rectify = pair.settings.rectify
    return rectify.enabled and rectify.start_iter is not None and not pair.rectifier.is_identity


def align_batch(probabilities: np.ndarray, batch: TrainBatch) -> np.ndarray:
    """Map weak-view teacher maps [U, C, h, w, d] into the strong views, CutMix boxes included."""
    aligned = []
    for index, (weak, strong) in enumerate(zip(batch.weak_records, batch.strong_records)):
        partner = probabilities[batch.partner_of[index]] if strong.cutmix is not None else None
        aligned.append(align_teacher_prediction(probabilities[index], weak, strong, partner))
    return np.stack(aligned)


def _pseudo_dice(target: torch.Tensor, truth: np.ndarray | None) -> float | None:
    if truth is None:
        return None
    hard = target.argmax(dim=1).numpy()
    classes = range(1, target.shape[1])
    return float(np.mean([np.mean([dice(h == c, t == c) for c in classes]) for h, t in zip(hard, truth)]))


@torch.no_grad()
def teacher_targets(pair: ModelPair, batch: TrainBatch) -> tuple[torch.Tensor, torch.Tensor, bool]:
    """
    Teacher pseudo-labels aligned to the strong views, before and after rectification.

    Returns:
        (plain, rectified, whether rectification was applied); both maps are [U, C, h, w, d].
    """
    pyramid = pair.teacher(torch.from_numpy(batch.weak_images))
    plain = pyramid.probabilities
    active = rectification_active(pair.settings, batch.iteration) and not pair.rectifier.is_identity
    target = pair.rectifier(plain, pair.teacher.relationship_map(pyramid)) if active else plain
    aligned_plain = torch.from_numpy(align_batch(plain.numpy(), batch))
    aligned_target = aligned_plain if not active else torch.from_numpy(align_batch(target.numpy(), batch))
    return aligned_plain, aligned_target, active


def train_step(pair: ModelPair, batch: TrainBatch) -> StepResult:
    """
    One full iteration on `batch`; mutates `pair`.

    Raises:
        NumericalError: If the loss is not finite.
    """
    settings = pair.settings
    iteration = batch.iteration
    tau = settings.train.tau
    generator = step_generator(settings.seed, iteration)
    lr = poly_lr(iteration, settings.train.max_iters, settings.train.lr0, settings.train.poly_power)

    plain, target, rectified = teacher_targets(pair, batch)

    n_labelled = len(batch.labelled_images)
    labels = torch.from_numpy(batch.labelled_labels)
    pyramid = pair.student(torch.from_numpy(np.concatenate([batch.labelled_images, batch.strong_images])))
    probabilities = pyramid.probabilities

    loss_sup = supervised_loss(probabilities[:n_labelled], labels)
    loss = loss_sup
    loss_dim = rel_map = None
    if interaction_trained(pair):
        rel_map = pair.student.relationship_map(pyramid.take(slice(0, n_labelled)))
        loss_dim = supervised_loss(F.softmax(rel_map, dim=1), labels)
        loss = loss + loss_dim
    loss_unsup = unsupervised_loss(probabilities[n_labelled:], target, tau)
    loss = loss + loss_unsup

    contrast = settings.contrast
    loss_cps = None
    if contrast.enabled and contrast.weight > 0:
        contrastive = build_contrastive_batch(
            pair.student.embed(pyramid),
            probabilities.detach(),
            labels,
            target,
            pair.student.class_prototypes(),
            contrast,
            tau=tau,
            xi=sample_xi(contrast, generator),
            generator=generator,
            previous_means=pair.class_means,
            previous_valid=pair.has_mean,
        )
        loss_cps = cps_loss(contrastive, contrast.temperature, contrast.reduction)
        pair.class_means, pair.has_mean = contrastive.class_means, contrastive.has_mean
        loss = loss + contrast.weight * loss_cps

    if not torch.isfinite(loss):
        raise NumericalError(f"Non-finite loss at iteration {iteration}: {float(loss)}")

    pair.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    set_lr(pair.optimizer, lr)
    pair.optimizer.step()

    loss_mu = None
    if rel_map is not None and pair.mu_optimizer is not None:
        loss_mu = mu_loss(pair.rectifier(probabilities[:n_labelled].detach(), rel_map.detach()), labels)
        pair.mu_optimizer.zero_grad(set_to_none=True)
        loss_mu.backward()
        set_lr(pair.mu_optimizer, lr)
        pair.mu_optimizer.step()

    teacher_grad_norm = pair.teacher_gradient_norm()
    pair.update_teacher()

    return StepResult(
        iteration=iteration,
        lr=lr,
        loss_total=float(loss),
        loss_sup=float(loss_sup),
        loss_dim=None if loss_dim is None else float(loss_dim),
        loss_unsup=float(loss_unsup),
        loss_cps=None if loss_cps is None else float(loss_cps),
        loss_mu=None if loss_mu is None else float(loss_mu),
        mu=pair.mu(),
        rectified=rectified,
        reliable_before=reliable_fraction(plain, tau),
        reliable_after=reliable_fraction(target, tau),
        pseudo_dice_before=_pseudo_dice(plain, batch.strong_truth),
        pseudo_dice_after=_pseudo_dice(target, batch.strong_truth),
        teacher_grad_norm=teacher_grad_norm,
    )


class Trainer:
    """
    Runs iterations [start, max_iters) over a split and writes the run directory:
    `metrics.jsonl`, `checkpoints/iter_NNNNNN/` every `checkpoint_every` iterations and the
    final `checkpoint/`.
    """

    def __init__(
        self,
        settings: ExperimentSettings,
        split: DatasetSplit,
        out_dir: str | Path,
        pair: ModelPair | None = None,
        start_iteration: int = 0,
        progress: bool = True,
        max_eval_cases: int = 8,
    ):
        if split.num_classes != settings.num_classes:
            raise ConfigurationError(
                f"Data has {split.num_classes} classes but settings expect {settings.num_classes}"
            )
        self.settings = settings
        self.split = split
        self.out_dir = Path(out_dir)
        seed_everything(settings.seed)
        self.pair = pair or ModelPair(settings)
        self.start_iteration = start_iteration
        self.progress = progress
        self.max_eval_cases = max_eval_cases

    @classmethod
    def resume(cls, checkpoint_dir: str | Path, split: DatasetSplit, out_dir: str | Path, **kwargs) -> "Trainer":
        return cls.from_checkpoint(load_checkpoint(checkpoint_dir), split, out_dir, **kwargs)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, split: DatasetSplit, out_dir: str | Path, **kwargs) -> "Trainer":
        """Continue from `checkpoint` under the settings it was saved with."""
        pair = restore_pair(checkpoint)
        logger.info("Resuming from iteration %d", checkpoint.iteration)
        return cls(pair.settings, split, out_dir, pair=pair, start_iteration=checkpoint.iteration, **kwargs)

    @property
    def metrics_path(self) -> Path:
        return self.out_dir / METRICS_NAME

    def evaluate(self) -> dict:
        """Validation Dice/Jaccard/ASD/95HD of the student."""
        cases = self.split.val[: self.max_eval_cases]
        scores = score_cases(
            network_predictor(self.pair.student),
            cases,
            window=self.settings.augment.crop_size,
            strides=self.settings.train.eval_strides,
        )
        return {name: summary.mean for name, summary in summarize(scores).items()}

    def save(self, iteration: int, directory: Path) -> Path:
        return save_checkpoint(collect_checkpoint(self.pair, iteration), directory)

    def fit(self, stop: int | None = None) -> list[StepResult]:
        """
        Train until `stop` (default `max_iters`).

        Raises:
            NumericalError: If a loss becomes non-finite; the last good checkpoint stays on disk.
        """
        train = self.settings.train
        stop = train.max_iters if stop is None else min(stop, train.max_iters)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.start_iteration == 0:
            self.metrics_path.write_text("", encoding="utf-8")

        results = []
        batches = BatchPrefetcher(self.split, self.settings, self.start_iteration, stop)
        progress = tqdm(batches, total=stop - self.start_iteration, desc="train", disable=not self.progress)
        for batch in progress:
            result = train_step(self.pair, batch)
            results.append(result)
            completed = batch.iteration + 1
            if batch.iteration % train.log_every == 0:
                append_jsonl(self.metrics_path, result.record())
            progress.set_postfix(loss=f"{result.loss_total:.4f}", mu=f"{result.mu:.3f}")

            if completed % train.eval_every == 0 and self.split.val:
                evaluation = self.evaluate()
                append_jsonl(self.metrics_path, {"kind": "eval", "iteration": completed, **evaluation})
                logger.info("Iteration %d validation: %s", completed, evaluation)
            if completed % train.checkpoint_every == 0:
                self.save(completed, self.out_dir / CHECKPOINTS_DIR / f"iter_{completed:06d}")

        self.save(stop, self.out_dir / FINAL_CHECKPOINT)
        return results
