import torch
from torch import nn

from ..settings import ExperimentSettings
from .backbone import FeaturePyramid, MiniVNet
from .contrastive import ProjectionHead
from .interaction import InteractionModule


class SegmentationNetwork(nn.Module):
    """
    Backbone, prototype interaction module and contrastive projection head.

    Student and teacher are two instances of this class; every parameter here is tracked by
    the teacher's moving average.
    """

    def __init__(self, settings: ExperimentSettings):
        super().__init__()
        model = settings.model
        num_classes = settings.num_classes
        self.backbone = MiniVNet(model, num_classes)
        self.interaction = InteractionModule(model, num_classes)
        self.projection = ProjectionHead(model.f4_dim, settings.contrast.projection_dim)
        # Fixed random map of prototype means from the interaction feature space into the projection
        # space. Positive centres are detached, so no loss reaches it; it keeps its initial weights.
        self.bridge = nn.Linear(model.feature_dim, settings.contrast.projection_dim)
        self.bridge.requires_grad_(False)

    @property
    def bank(self):
        return self.interaction.bank

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        return self.backbone(x)

    def relationship_map(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return self.interaction(pyramid)

    def embed(self, pyramid: FeaturePyramid) -> torch.Tensor:
        return self.projection(pyramid.f4)

    def class_prototypes(self) -> torch.Tensor:
        """[C, P] projected mean prototype per class."""
        return self.bridge(self.bank.class_means())


def build_network(settings: ExperimentSettings, seed: int | None = None) -> SegmentationNetwork:
    """Build a network, seeding the parameter initialisation when `seed` is given."""
    if seed is not None:
        torch.manual_seed(seed)
    return SegmentationNetwork(settings)
