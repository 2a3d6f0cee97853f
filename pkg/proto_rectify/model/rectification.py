"""
Pseudo-label rectification with a relationship map.

Probability maps carry the class axis fourth from the end, so both [C, H, W, D] and
[B, C, H, W, D] are accepted.
"""

from abc import ABC, abstractmethod

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigurationError, ContractViolation, ShapeMismatchError
from ..settings import RectifierMode, RectifyConfig
from ..util import get_basic_logger
from .losses import supervised_loss

logger = get_basic_logger(__name__)

CLASS_AXIS = -4


class CorrectionCoefficient(nn.Module):
    """
    μ = sigmoid(raw), raw initialised at 0 (μ = 0.5). A fixed value freezes μ.
    """

    def __init__(self, fixed_mu: float | None = None):
        super().__init__()
        self.fixed_mu = fixed_mu
        self.raw = nn.Parameter(torch.zeros(()), requires_grad=fixed_mu is None)

    @property
    def learnable(self) -> bool:
        return self.fixed_mu is None

    def forward(self) -> torch.Tensor:
        if self.fixed_mu is not None:
            return torch.tensor(self.fixed_mu, dtype=self.raw.dtype)
        return torch.sigmoid(self.raw)

    def value(self) -> float:
        return float(self.forward().detach())


def _check_shapes(pred: torch.Tensor, rel_map: torch.Tensor) -> None:
    if pred.shape != rel_map.shape or pred.ndim < 4:
        raise ShapeMismatchError(f"Prediction {tuple(pred.shape)} and relationship map {tuple(rel_map.shape)} differ")


def renormalize(scores: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Clamp scores to `eps` and divide by the class sum."""
    clamped = scores.clamp_min(eps)
    return clamped / clamped.sum(dim=CLASS_AXIS, keepdim=True)


def rectify(pred: torch.Tensor, rel_map: torch.Tensor, mu: torch.Tensor | float, eps: float = 1e-6) -> torch.Tensor:
    """
    Additive rectification pred + (1 - μ)·map, projected back onto the simplex.

    A μ of exactly 1 returns `pred` itself.

    Raises:
        ShapeMismatchError: If `pred` and `rel_map` differ in shape.
    """
    _check_shapes(pred, rel_map)
    if not isinstance(mu, torch.Tensor) and mu == 1:
        return pred
    return renormalize(pred + (1 - mu) * rel_map, eps)


def replace_uncertain(pred: torch.Tensor, rel_map: torch.Tensor, tau: float) -> torch.Tensor:
    """
    Fixed rectification: where the prediction is below `tau` and the softmaxed map is more
    confident, take the map's distribution.
    """
    _check_shapes(pred, rel_map)
    candidate = F.softmax(rel_map, dim=CLASS_AXIS)
    pred_max = pred.max(dim=CLASS_AXIS, keepdim=True).values
    candidate_max = candidate.max(dim=CLASS_AXIS, keepdim=True).values
    replace = (pred_max < tau) & (pred_max < candidate_max)
    return torch.where(replace, candidate, pred)


def fuse_concat(pred: torch.Tensor, rel_map: torch.Tensor, fuse: nn.Conv3d) -> torch.Tensor:
    """Softmax of `fuse` applied to the class-axis concatenation of prediction and map."""
    _check_shapes(pred, rel_map)
    batched = pred.ndim == 5
    stacked = torch.cat([pred, rel_map], dim=CLASS_AXIS)
    if not batched:
        stacked = stacked.unsqueeze(0)
    out = F.softmax(fuse(stacked), dim=1)
    return out if batched else out.squeeze(0)


class Rectifier(nn.Module, ABC):
    """
    Base class for rectification rules. Every rule owns a correction coefficient so μ is
    always reportable, even by rules that do not use it.
    """

    mode: RectifierMode

    def __init__(self, num_classes: int, config: RectifyConfig, tau: float):
        super().__init__()
        self.num_classes = num_classes
        self.config = config
        self.tau = tau
        self.coefficient = CorrectionCoefficient(config.fixed_mu)

    @property
    def learnable(self) -> bool:
        """Whether the dedicated coefficient step has anything to update."""
        return any(p.requires_grad for p in self.parameters())

    @property
    def is_identity(self) -> bool:
        return False

    def mu(self) -> float:
        return self.coefficient.value()

    @abstractmethod
    def forward(self, pred: torch.Tensor, rel_map: torch.Tensor) -> torch.Tensor: ...


class FixedRectifier(Rectifier):
    mode = RectifierMode.V1_FIXED

    @property
    def learnable(self) -> bool:
        return False

    def forward(self, pred: torch.Tensor, rel_map: torch.Tensor) -> torch.Tensor:
        return replace_uncertain(pred, rel_map, self.tau)


class ConcatRectifier(Rectifier):
    """Learned 3x3x3 convolution over the channel concatenation of prediction and map."""

    mode = RectifierMode.V2_LEARNABLE_CONCAT

    def __init__(self, num_classes: int, config: RectifyConfig, tau: float):
        super().__init__(num_classes, config, tau)
        self.coefficient.raw.requires_grad_(False)
        self.fuse = nn.Conv3d(2 * num_classes, num_classes, kernel_size=3, padding=1)

    def forward(self, pred: torch.Tensor, rel_map: torch.Tensor) -> torch.Tensor:
        return fuse_concat(pred, rel_map, self.fuse)


class AdditiveRectifier(Rectifier):
    mode = RectifierMode.V3_LEARNABLE_ADDITIVE

    @property
    def is_identity(self) -> bool:
        return self.config.fixed_mu == 1

    def forward(self, pred: torch.Tensor, rel_map: torch.Tensor) -> torch.Tensor:
        if self.is_identity:
            _check_shapes(pred, rel_map)
            return pred
        return rectify(pred, rel_map, self.coefficient(), self.config.eps)


RECTIFIER_REGISTRY: dict[str, type[Rectifier]] = {
    RectifierMode.V1_FIXED.value: FixedRectifier,
    RectifierMode.V2_LEARNABLE_CONCAT.value: ConcatRectifier,
    RectifierMode.V3_LEARNABLE_ADDITIVE.value: AdditiveRectifier,
}


def get_rectifier(mode: RectifierMode | str, num_classes: int, config: RectifyConfig, tau: float) -> Rectifier:
    """
    Factory function to instantiate a rectifier by mode.

    Raises:
        ConfigurationError: If `mode` is not registered.
    """
    key = mode.value if isinstance(mode, RectifierMode) else str(mode)
    if key not in RECTIFIER_REGISTRY:
        raise ConfigurationError(f"Unknown rectifier mode: {key}. Available: {list(RECTIFIER_REGISTRY.keys())}")
    return RECTIFIER_REGISTRY[key](num_classes, config, tau)


def register_rectifier(name: str, rectifier_class: type[Rectifier]) -> None:
    RECTIFIER_REGISTRY[name] = rectifier_class


def rectification_variants(
    pred: torch.Tensor,
    rel_map: torch.Tensor,
    mu: torch.Tensor | float,
    mode: RectifierMode | str,
    tau: float = 0.9,
    fuse: nn.Conv3d | None = None,
    eps: float = 1e-6,
) -> torch.Tensor:
    """
    Functional form of the three rectification rules.

    Args:
        fuse: The learned convolution of the concatenation rule (required for that mode).

    Raises:
        ConfigurationError: For an unknown mode or a concatenation rule without `fuse`.
    """
    key = mode.value if isinstance(mode, RectifierMode) else str(mode)
    if key == RectifierMode.V1_FIXED.value:
        return replace_uncertain(pred, rel_map, tau)
    if key == RectifierMode.V2_LEARNABLE_CONCAT.value:
        if fuse is None:
            raise ConfigurationError("The concatenation rectifier needs its fusion convolution")
        return fuse_concat(pred, rel_map, fuse)
    if key == RectifierMode.V3_LEARNABLE_ADDITIVE.value:
        return rectify(pred, rel_map, mu, eps)
    raise ConfigurationError(f"Unknown rectifier mode: {key}. Available: {list(RECTIFIER_REGISTRY.keys())}")


def mu_loss(rectified: torch.Tensor, label: torch.Tensor | None) -> torch.Tensor:
    """
    Supervised loss of a rectified labelled prediction.

    The caller builds `rectified` from detached prediction and map so the gradient reaches
    only the rectifier's own parameters.

    Raises:
        ContractViolation: If no label is given (unlabelled batch).
    """
    if label is None:
        raise ContractViolation("The correction coefficient is trained on labelled data only")
    return supervised_loss(rectified, label)
