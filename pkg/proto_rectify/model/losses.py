"""
Segmentation losses shared by the trainer and the correction-coefficient update.

Probability maps are [B, C, H, W, D]; labels are integer maps [B, H, W, D].
"""

import torch
import torch.nn.functional as F

from ..errors import ShapeMismatchError

EPS = 1e-8
DICE_SMOOTH = 1e-5


def _check_pair(pred: torch.Tensor, label: torch.Tensor) -> None:
    if pred.ndim != label.ndim + 1 or pred.shape[:1] + pred.shape[2:] != label.shape:
        raise ShapeMismatchError(f"Prediction {tuple(pred.shape)} does not match label {tuple(label.shape)}")


def soft_dice_loss(pred: torch.Tensor, label: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """1 - mean over classes of the soft Dice coefficient, pooled over the batch."""
    _check_pair(pred, label)
    onehot = F.one_hot(label.long(), pred.shape[1]).movedim(-1, 1).to(pred.dtype)
    dims = (0, *range(2, pred.ndim))
    intersection = (pred * onehot).sum(dim=dims)
    total = pred.sum(dim=dims) + onehot.sum(dim=dims)
    return 1 - ((2 * intersection + smooth) / (total + smooth)).mean()


def cross_entropy(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Voxel-mean negative log-likelihood of the labelled class."""
    _check_pair(pred, label)
    picked = pred.gather(1, label.long().unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(EPS)).mean()


def supervised_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """
    Equal-weight soft Dice and cross entropy.

    Args:
        pred: Probability map [B, C, H, W, D].
        label: Integer class map [B, H, W, D].
    """
    return 0.5 * soft_dice_loss(pred, label) + 0.5 * cross_entropy(pred, label)


def unsupervised_loss(pred: torch.Tensor, target: torch.Tensor, tau: float) -> torch.Tensor:
    """
    Confidence-filtered consistency loss.

    Voxels whose target confidence is below `tau` contribute zero; the sum is divided by the
    total voxel count, so the loss is zero when nothing passes.

    Args:
        pred: Student probabilities [B, C, H, W, D].
        target: (Rectified) teacher probabilities, same shape; treated as a constant.
        tau: Confidence threshold.
    """
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"Student {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    confidence, hard = target.detach().max(dim=1)
    mask = (confidence >= tau).to(pred.dtype)
    nll = -torch.log(pred.gather(1, hard.unsqueeze(1)).squeeze(1).clamp_min(EPS))
    return (mask * nll).sum() / mask.numel()


def reliable_fraction(probabilities: torch.Tensor, tau: float) -> float:
    """Share of voxels whose maximum class probability reaches `tau`."""
    return float((probabilities.max(dim=1).values >= tau).float().mean())
