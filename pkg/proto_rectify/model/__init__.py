"""
Networks, prototype interaction, rectification rules, contrastive supervision and losses.
"""

from .backbone import FeaturePyramid, MiniVNet
from .contrastive import (
    ClassContrast,
    ContrastiveBatch,
    ProjectionHead,
    anchor_lattice,
    build_contrastive_batch,
    cps_loss,
    negative_lattice,
    positive_centre,
    sample_xi,
)
from .interaction import (
    CrossAttentionBlock,
    InteractionModule,
    PrototypeBank,
    SpatialAggregation,
    block1_update,
    block2_proximity,
    relationship_map,
)
from .losses import reliable_fraction, supervised_loss, unsupervised_loss
from .network import SegmentationNetwork, build_network
from .rectification import (
    RECTIFIER_REGISTRY,
    CorrectionCoefficient,
    Rectifier,
    get_rectifier,
    mu_loss,
    rectification_variants,
    rectify,
    register_rectifier,
)

__all__ = [
    "FeaturePyramid",
    "MiniVNet",
    "ClassContrast",
    "ContrastiveBatch",
    "ProjectionHead",
    "anchor_lattice",
    "build_contrastive_batch",
    "cps_loss",
    "negative_lattice",
    "positive_centre",
    "sample_xi",
    "CrossAttentionBlock",
    "InteractionModule",
    "PrototypeBank",
    "SpatialAggregation",
    "block1_update",
    "block2_proximity",
    "relationship_map",
    "reliable_fraction",
    "supervised_loss",
    "unsupervised_loss",
    "SegmentationNetwork",
    "build_network",
    "RECTIFIER_REGISTRY",
    "CorrectionCoefficient",
    "Rectifier",
    "get_rectifier",
    "mu_loss",
    "rectification_variants",
    "rectify",
    "register_rectifier",
]
