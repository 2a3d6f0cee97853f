"""
Contrastive supervision of uncertain voxels with blended positive centres.

Anchors are low-confidence voxels of a class, negatives are voxels confidently (or truly)
of another class, and the positive of class c mixes the batch mean representation of c with
the mean of its learned prototypes.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError, ShapeMismatchError
from ..settings import ContrastConfig, XiMode
from ..util import get_basic_logger

logger = get_basic_logger(__name__)


class ProjectionHead(nn.Module):
    """3x3x3 then 1x1x1 convolution over the full-resolution decoder tap."""

    def __init__(self, in_channels: int, projection_dim: int):
        super().__init__()
        self.spatial = nn.Conv3d(in_channels, in_channels, kernel_size=3, padding=1)
        self.project = nn.Conv3d(in_channels, projection_dim, kernel_size=1)

    def forward(self, f4: torch.Tensor) -> torch.Tensor:
        return self.project(self.spatial(f4))


def _check_thresholds(tau: float, tau_w: float) -> None:
    if not tau_w < tau:
        raise ConfigurationError(f"tau_w ({tau_w}) must be smaller than tau ({tau})")


def anchor_lattice(
    labelled: bool,
    target: torch.Tensor,
    pred: torch.Tensor,
    tau: float,
    tau_w: float,
    c: int,
) -> torch.Tensor:
    """
    Boolean mask of anchor voxels for class `c`.

    Args:
        labelled: Whether `target` is a ground-truth label map.
        target: Integer labels [B, H, W, D] when labelled, else rectified pseudo-label
            probabilities [B, C, H, W, D].
        pred: Student probabilities [B, C, H, W, D].

    Raises:
        ConfigurationError: If tau_w >= tau.
    """
    _check_thresholds(tau, tau_w)
    uncertain = pred[:, c] < tau
    if labelled:
        return (target == c) & uncertain
    confidence, hard = target.max(dim=1)
    return uncertain & (confidence > tau_w) & (hard == c)


def negative_lattice(labelled: bool, target: torch.Tensor, tau_w: float, c: int) -> torch.Tensor:
    """Boolean mask of negative voxels for class `c` (same target conventions as `anchor_lattice`)."""
    if labelled:
        return target != c
    confidence, hard = target.max(dim=1)
    return (confidence > tau_w) & (hard != c)


def support_lattice(labelled: bool, target: torch.Tensor, tau_w: float, c: int) -> torch.Tensor:
    """Voxels that define the class-mean representation of `c`."""
    if labelled:
        return target == c
    confidence, hard = target.max(dim=1)
    return (confidence > tau_w) & (hard == c)


def positive_centre(r_m: torch.Tensor, prototype: torch.Tensor, xi: float) -> torch.Tensor:
    """
    (r_m + ξ·prototype) / (1 + ξ), detached from the graph.

    Raises:
        ConfigurationError: If ξ is outside (0, 1].
    """
    if not 0 < xi <= 1:
        raise ConfigurationError(f"xi must lie in (0, 1], got {xi}")
    if r_m.shape != prototype.shape:
        raise ShapeMismatchError(f"Class mean {tuple(r_m.shape)} and prototype {tuple(prototype.shape)} differ")
    return ((r_m + xi * prototype) / (1 + xi)).detach()


def sample_xi(config: ContrastConfig, generator: torch.Generator | None = None) -> float:
    if config.xi_mode == XiMode.RANDOM:
        return float(1 - torch.rand((), generator=generator, dtype=torch.float64))
    return config.xi


@dataclass
class ClassContrast:
    class_index: int
    anchors: torch.Tensor
    """[A, P]"""
    negatives: torch.Tensor
    """[K, P]"""
    centre: torch.Tensor
    """[P], constant"""


@dataclass
class ContrastiveBatch:
    classes: list[ClassContrast] = field(default_factory=list)
    class_means: torch.Tensor | None = None
    """[C, P] mean representations used this step (or carried over), detached."""
    has_mean: torch.Tensor | None = None
    """[C] bool, whether `class_means[c]` is defined."""

    def is_empty(self) -> bool:
        return not any(len(entry.anchors) for entry in self.classes)

    @property
    def num_anchors(self) -> int:
        return sum(len(entry.anchors) for entry in self.classes)


def _gather(embeddings: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Vectors [n, P] of `embeddings` [B, P, H, W, D] where `mask` [B, H, W, D] is set."""
    return embeddings.movedim(1, -1)[mask]


def _subsample(vectors: torch.Tensor, limit: int, generator: torch.Generator | None) -> torch.Tensor:
    if len(vectors) <= limit:
        return vectors
    keep = torch.randperm(len(vectors), generator=generator)[:limit]
    return vectors[keep]


def build_contrastive_batch(
    embeddings: torch.Tensor,
    pred: torch.Tensor,
    labels: torch.Tensor,
    targets: torch.Tensor,
    prototypes: torch.Tensor,
    config: ContrastConfig,
    tau: float,
    xi: float,
    generator: torch.Generator | None = None,
    previous_means: torch.Tensor | None = None,
    previous_valid: torch.Tensor | None = None,
) -> ContrastiveBatch:
    """
    Assemble anchors, negatives and positive centres for every class.

    Args:
        embeddings: Projected representations [L + U, P, H, W, D], labelled first.
        pred: Student probabilities [L + U, C, H, W, D].
        labels: Ground truth of the labelled part [L, H, W, D].
        targets: Rectified pseudo-labels aligned to the unlabelled part [U, C, H, W, D].
        prototypes: Class prototype means projected to P, [C, P].
        config: Sampling caps, τ_w and the centre source.
        tau: Student confidence threshold.
        xi: Blend coefficient for this step.
        generator: Source of sampling randomness.
        previous_means: Class means from an earlier step, used when a class has no support now.
        previous_valid: [C] bool mask for `previous_means`.

    Classes without anchors, negatives or a class mean are skipped.
    """
    n_labelled = labels.shape[0]
    num_classes = pred.shape[1]
    if prototypes.shape != (num_classes, embeddings.shape[1]):
        raise ShapeMismatchError(
            f"Prototypes {tuple(prototypes.shape)} must be [C={num_classes}, P={embeddings.shape[1]}]"
        )
    _check_thresholds(tau, config.tau_w)
    labelled_embed, unlabelled_embed = embeddings[:n_labelled], embeddings[n_labelled:]
    labelled_pred, unlabelled_pred = pred[:n_labelled], pred[n_labelled:]

    means = torch.zeros_like(prototypes).detach()
    valid = torch.zeros(num_classes, dtype=torch.bool)
    if previous_means is not None and previous_valid is not None:
        means = previous_means.detach().clone().to(prototypes.dtype)
        valid = previous_valid.clone()

    batch = ContrastiveBatch()
    for c in range(num_classes):
        support = torch.cat(
            [
                _gather(labelled_embed, support_lattice(True, labels, config.tau_w, c)),
                _gather(unlabelled_embed, support_lattice(False, targets, config.tau_w, c)),
            ]
        )
        if len(support):
            means[c] = support.detach().mean(dim=0)
            valid[c] = True
        if not valid[c]:
            logger.debug("Class %d has no support and no earlier mean; skipped", c)
            continue

        anchors = torch.cat(
            [
                _gather(labelled_embed, anchor_lattice(True, labels, labelled_pred, tau, config.tau_w, c)),
                _gather(unlabelled_embed, anchor_lattice(False, targets, unlabelled_pred, tau, config.tau_w, c)),
            ]
        )
        negatives = torch.cat(
            [
                _gather(labelled_embed, negative_lattice(True, labels, config.tau_w, c)),
                _gather(unlabelled_embed, negative_lattice(False, targets, config.tau_w, c)),
            ]
        )
        if not len(anchors) or not len(negatives):
            continue

        if config.centre == "mean":
            centre = means[c].detach()
        elif config.centre == "prototype":
            centre = prototypes[c].detach()
        else:
            centre = positive_centre(means[c], prototypes[c], xi)
        batch.classes.append(
            ClassContrast(
                class_index=c,
                anchors=_subsample(anchors, config.max_anchors, generator),
                negatives=_subsample(negatives, config.max_negatives, generator),
                centre=centre,
            )
        )
    batch.class_means = means
    batch.has_mean = valid
    return batch


def cps_loss(batch: ContrastiveBatch, temperature: float, reduction: str = "sum") -> torch.Tensor:
    """
    InfoNCE over cosine similarities with one positive centre per class.

    Summed over anchors and classes; `reduction="mean"` divides by the anchor count. An empty
    batch gives a zero that carries no gradient.

    Raises:
        ConfigurationError: If the temperature is not positive or the reduction is unknown.
    """
    if temperature <= 0:
        raise ConfigurationError(f"Temperature must be positive, got {temperature}")
    if reduction not in ("sum", "mean"):
        raise ConfigurationError(f"Unknown reduction '{reduction}'")
    if batch.is_empty():
        return torch.zeros(())

    total = None
    for entry in batch.classes:
        if not len(entry.anchors):
            continue
        positive = F.cosine_similarity(entry.anchors, entry.centre.unsqueeze(0), dim=-1)
        negative = F.cosine_similarity(entry.anchors.unsqueeze(1), entry.negatives.unsqueeze(0), dim=-1)
        logits = torch.cat([positive.unsqueeze(1), negative], dim=1) / temperature
        term = (torch.logsumexp(logits, dim=1) - positive / temperature).sum()
        total = term if total is None else total + term
    if reduction == "mean":
        total = total / batch.num_anchors
    return total
