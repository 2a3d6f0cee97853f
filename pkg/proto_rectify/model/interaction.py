"""
Prototype interaction: multi-prototype banks, pairwise cross-attention, and the
cross-class aggregation that turns prototype/feature proximities into a relationship map.

Shapes use B for batch, C classes, R prototype sets, N positions.
"""

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ShapeMismatchError
from ..settings import AggregationConfig, ModelConfig
from .backbone import FeaturePyramid


class PrototypeBank(nn.Module):
    """
    Learnable prototypes P of shape [C, R, F]; `p(i)` is the i-th [C, F] prototype matrix.
    """

    def __init__(self, num_classes: int, num_prototypes: int, feature_dim: int):
        super().__init__()
        self.prototypes = nn.Parameter(torch.randn(num_classes, num_prototypes, feature_dim) / math.sqrt(feature_dim))

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[1]

    def p(self, index: int) -> torch.Tensor:
        return self.prototypes[:, index, :]

    def class_means(self) -> torch.Tensor:
        """Mean prototype per class, [C, F]."""
        return self.prototypes.mean(dim=1)


class CrossAttentionBlock(nn.Module):
    """
    Query/key(/value) linear projections between prototypes and flattened features.
    """

    def __init__(self, query_dim: int, key_dim: int, out_dim: int, with_values: bool = True):
        super().__init__()
        self.out_dim = out_dim
        self.query = nn.Linear(query_dim, out_dim)
        self.key = nn.Linear(key_dim, out_dim)
        self.value = nn.Linear(key_dim, out_dim) if with_values else None

    def scores(self, queries: torch.Tensor, keys: torch.Tensor) -> torch.Tensor:
        """
        Args:
            queries: [..., C, Fq]
            keys: [..., N, Fk]

        Returns:
            [..., C, N] scaled dot products.
        """
        if queries.shape[-1] != self.query.in_features or keys.shape[-1] != self.key.in_features:
            raise ShapeMismatchError(
                f"Attention expects query dim {self.query.in_features} and key dim {self.key.in_features}, "
                f"got {queries.shape[-1]} and {keys.shape[-1]}"
            )
        return self.query(queries) @ self.key(keys).transpose(-1, -2) / math.sqrt(self.out_dim)

    def attend(self, queries: torch.Tensor, keys: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Scores plus the softmax-over-positions weighted sum of projected values."""
        if self.value is None:
            raise ShapeMismatchError("This block has no value projection")
        scores = self.scores(queries, keys)
        return scores, F.softmax(scores, dim=-1) @ self.value(keys)


def block1_update(block: CrossAttentionBlock, p_i: torch.Tensor, r2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Cross attention between one prototype matrix and quarter-resolution features.

    Args:
        p_i: [..., C, F] prototypes.
        r2: [..., N4, F] projected features.

    Returns:
        (m_i [..., C, N4], updated prototypes [..., C, F])
    """
    return block.attend(p_i, r2)


def block2_proximity(block: CrossAttentionBlock, p_i_updated: torch.Tensor, r3: torch.Tensor) -> torch.Tensor:
    """
    Proximity scores between updated prototypes and half-resolution features.

    Args:
        p_i_updated: [..., C, F]
        r3: [..., N2, F3]

    Returns:
        [..., C, N2]
    """
    return block.scores(p_i_updated, r3)


class SpatialAggregation(nn.Module):
    """
    Fold R proximity maps per class into one score map per class, then upsample x2.

    With every switch on: a 3x3x3 convolution R->R (spatial awareness), a 1x1x1 convolution R->1
    (convolutional integration), both shared by all classes (cross-class reasoning). Switched-off
    stages fall back to identity, summation over R, and per-class convolution weights respectively.
    """

    def __init__(self, num_classes: int, num_prototypes: int, config: AggregationConfig | None = None):
        super().__init__()
        config = config or AggregationConfig()
        self.config = config
        self.num_classes = num_classes
        self.num_prototypes = num_prototypes
        groups = 1 if config.cross_class else num_classes
        channels = num_prototypes * groups
        self.spatial = (
            nn.Conv3d(channels, channels, kernel_size=3, padding=1, groups=groups) if config.spatial_awareness else None
        )
        self.integrate = nn.Conv3d(channels, groups, kernel_size=1, groups=groups) if config.conv_integration else None

    def forward(self, proximity: torch.Tensor, output_size: tuple[int, int, int] | None = None) -> torch.Tensor:
        """
        Args:
            proximity: [B, C, R, h, w, d] stacked proximity matrices.
            output_size: Spatial size of the result; defaults to twice the input.

        Returns:
            [B, C, H, W, D] relationship map.
        """
        batch, classes, sets, *spatial = proximity.shape
        if sets != self.num_prototypes or classes != self.num_classes:
            raise ShapeMismatchError(
                f"Aggregation configured for C={self.num_classes}, R={self.num_prototypes}, got C={classes}, R={sets}"
            )
        if self.config.cross_class:
            x = proximity.reshape(batch * classes, sets, *spatial)  # classes folded into the batch axis
        else:
            x = proximity.reshape(batch, classes * sets, *spatial)
        if self.spatial is not None:
            x = self.spatial(x)
        if self.integrate is not None:
            x = self.integrate(x)
        elif self.config.cross_class:
            x = x.sum(dim=1, keepdim=True)
        else:
            x = x.reshape(batch, classes, sets, *spatial).sum(dim=2)
        x = x.reshape(batch, classes, *spatial)
        size = output_size or tuple(2 * s for s in spatial)
        return F.interpolate(x, size=size, mode="trilinear", align_corners=False)


class InteractionModule(nn.Module):
    """
    Prototype bank, both attention blocks, feature projections and aggregation.
    """

    def __init__(self, config: ModelConfig, num_classes: int):
        super().__init__()
        self.bank = PrototypeBank(num_classes, config.num_prototypes, config.feature_dim)
        self.project2 = nn.Conv3d(config.feature_dim, config.feature_dim, kernel_size=1)
        self.project3 = nn.Conv3d(config.f3_dim, config.f3_dim, kernel_size=1)
        self.block1 = CrossAttentionBlock(config.feature_dim, config.feature_dim, config.feature_dim)
        self.block2 = CrossAttentionBlock(config.feature_dim, config.f3_dim, config.f3_dim, with_values=False)
        self.aggregate = SpatialAggregation(num_classes, config.num_prototypes, config.aggregation)

    @staticmethod
    def _flatten(features: torch.Tensor) -> torch.Tensor:
        """[B, F, h, w, d] -> [B, N, F]"""
        return features.flatten(start_dim=2).transpose(1, 2)

    def proximities(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """Stacked block-II proximity matrices, [B, C, R, H/2, W/2, D/2]."""
        r2 = self._flatten(self.project2(pyramid.f2))
        r3 = self._flatten(self.project3(pyramid.f3))
        # All R prototype matrices at once: [1, C*R, F] broadcast over the batch.
        classes, sets, dim = self.bank.prototypes.shape
        prototypes = self.bank.prototypes.reshape(1, classes * sets, dim)
        _, updated = block1_update(self.block1, prototypes, r2)
        proximity = block2_proximity(self.block2, updated, r3)
        return proximity.reshape(proximity.shape[0], classes, sets, *pyramid.f3.shape[-3:])

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        """Relationship map [B, C, H, W, D] at the resolution of f4."""
        return self.aggregate(self.proximities(pyramid), output_size=tuple(pyramid.f4.shape[-3:]))


def relationship_map(module: InteractionModule, pyramid: FeaturePyramid) -> torch.Tensor:
    return module(pyramid)
