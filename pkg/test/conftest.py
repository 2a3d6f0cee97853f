"""Pytest configuration and fixtures for proto_rectify tests."""

import os

import hypothesis
import numpy as np
import pytest
import torch

from proto_rectify.data.synthetic import dataset_from_config
from proto_rectify.data.volume import DatasetSplit
from proto_rectify.settings import ExperimentSettings, build_settings

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))

TINY_OVERRIDES = {
    "seed": 0,
    "data": {"size": (16, 16, 16), "n_labelled": 2, "n_unlabelled": 4, "n_val": 1},
    "augment": {"crop_size": (12, 12, 12)},
    "model": {"base_channels": 4, "feature_dim": 8, "f3_dim": 6, "f4_dim": 4, "num_prototypes": 2},
    "rectify": {"start_iter": 1},
    "contrast": {"projection_dim": 4, "max_anchors": 16, "max_negatives": 32},
    "train": {
        "max_iters": 4,
        "eval_every": 1000,
        "checkpoint_every": 1000,
        "prefetch_workers": 0,
        "eval_strides": (4, 4, 4),
    },
}


@pytest.fixture(scope="session")
def tiny_settings() -> ExperimentSettings:
    """
    Small but complete settings: 16³ volumes, 12³ crops, narrow channels.

    Every stage of the pipeline runs with these in well under a second per iteration.
    """
    return build_settings(TINY_OVERRIDES)


@pytest.fixture(scope="session")
def tiny_split(tiny_settings: ExperimentSettings) -> DatasetSplit:
    """Synthetic split matching `tiny_settings` (2 labelled, 4 unlabelled, 1 validation case)."""
    return dataset_from_config(tiny_settings.seed, tiny_settings.data)


@pytest.fixture(autouse=True)
def _seed_torch():
    """Reset torch's global generator so parameter initialisation is reproducible per test."""
    torch.manual_seed(0)
    yield
