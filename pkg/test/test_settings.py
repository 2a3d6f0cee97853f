"""Tests for settings loading, validation and ablation switches."""

import json

import pytest

from proto_rectify.errors import ConfigurationError
from proto_rectify.settings import (
    ABLATIONS,
    ExperimentSettings,
    RectifierMode,
    XiMode,
    apply_ablations,
    build_settings,
    load_settings,
)


class TestDefaults:
    """Defaults follow the reported training recipe."""

    def test_training_recipe(self):
        """Learning rate, momentum, decay, batch sizes and contrastive caps."""
        settings = ExperimentSettings()
        assert settings.train.lr0 == pytest.approx(2.5e-3)
        assert settings.train.momentum == pytest.approx(0.9)
        assert settings.train.weight_decay == pytest.approx(5e-4)
        assert settings.train.labelled_batch == 2
        assert settings.train.unlabelled_batch == 2
        assert settings.rectify.start_iter == 800
        assert settings.contrast.temperature == pytest.approx(0.5)
        assert settings.contrast.xi == pytest.approx(0.6)
        assert settings.model.num_prototypes == 16
        assert settings.contrast.max_anchors == 256
        assert settings.contrast.max_negatives == 512

    def test_default_modes(self):
        """Learnable additive rectifier and a fixed ξ."""
        settings = ExperimentSettings()
        assert settings.rectify.mode == RectifierMode.V3_LEARNABLE_ADDITIVE
        assert settings.contrast.xi_mode == XiMode.FIXED
        assert settings.augment.noise_sigma == pytest.approx(0.1)


class TestValidation:
    def test_tau_w_must_be_below_tau(self):
        """The contrastive threshold must sit below the pseudo-label threshold."""
        with pytest.raises(ConfigurationError, match="tau_w"):
            build_settings({"contrast": {"tau_w": 0.95}, "train": {"tau": 0.9}})

    def test_channel_plan_must_shrink(self):
        """Decoder taps narrow towards full resolution."""
        with pytest.raises(ConfigurationError):
            build_settings({"model": {"feature_dim": 8, "f3_dim": 8, "f4_dim": 4}})

    def test_size_must_be_divisible_by_four(self):
        """Two stride-2 stages need sizes divisible by four."""
        with pytest.raises(ConfigurationError, match="divisible by 4"):
            build_settings({"data": {"size": (30, 32, 32)}})

    def test_crop_larger_than_volume(self):
        """Crops must fit inside the volume."""
        with pytest.raises(ConfigurationError, match="exceeds"):
            build_settings({"data": {"size": (16, 16, 16)}, "augment": {"crop_size": (24, 24, 24)}})

    def test_unlabelled_batch_must_pair(self):
        """CutMix pairs need an even unlabelled batch."""
        with pytest.raises(ConfigurationError, match="even"):
            build_settings({"train": {"unlabelled_batch": 3}})

    def test_unknown_key_rejected(self):
        """Misspelt keys are errors, not silently ignored."""
        with pytest.raises(ConfigurationError):
            build_settings({"train": {"learning_rate": 0.1}})


class TestLoading:
    """JSON file, environment and dotted overrides."""

    def test_missing_file(self, tmp_path):
        """A missing config file is a configuration error."""
        with pytest.raises(ConfigurationError, match="not found"):
            load_settings(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        """Malformed JSON is reported as such."""
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(ConfigurationError, match="not valid JSON"):
            load_settings(path)

    def test_file_values_are_used(self, tmp_path):
        """File values override defaults, untouched keys keep theirs."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 7, "train": {"max_iters": 33}}), encoding="utf-8")
        settings = load_settings(path)
        assert settings.seed == 7
        assert settings.train.max_iters == 33
        assert settings.train.lr0 == pytest.approx(2.5e-3)

    def test_environment_beats_file(self, tmp_path, monkeypatch):
        """PR_ variables take priority over the file."""
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"train": {"max_iters": 33}}), encoding="utf-8")
        monkeypatch.setenv("PR_TRAIN__MAX_ITERS", "12")
        assert load_settings(path).train.max_iters == 12

    def test_overrides_beat_environment(self, monkeypatch):
        """Explicit overrides take priority over the environment."""
        monkeypatch.setenv("PR_TRAIN__MAX_ITERS", "12")
        assert load_settings(overrides={"train.max_iters": 5}).train.max_iters == 5

    def test_unknown_override(self):
        """Dotted overrides must name an existing key."""
        with pytest.raises(ConfigurationError, match="Unknown config key"):
            load_settings(overrides={"train.nope": 1})

    def test_config_hash_tracks_values(self):
        """Equal settings hash equal; any change changes the hash."""
        a = ExperimentSettings()
        b = a.with_overrides({"seed": 1})
        assert a.config_hash() == ExperimentSettings().config_hash()
        assert a.config_hash() != b.config_hash()


class TestAblations:
    def test_every_switch_builds(self):
        """Every registered ablation yields valid settings."""
        for name in ABLATIONS:
            apply_ablations(ExperimentSettings(), [name])

    def test_no_crln(self):
        assert apply_ablations(ExperimentSettings(), ["no-crln"]).rectify.enabled is False

    def test_aggregation_switches_merge(self):
        """Aggregation switches combine instead of replacing each other."""
        settings = apply_ablations(ExperimentSettings(), ["agg-no-sa", "agg-no-ci"])
        aggregation = settings.model.aggregation
        assert not aggregation.spatial_awareness
        assert not aggregation.conv_integration
        assert aggregation.cross_class

    def test_unknown_ablation(self):
        """Unregistered switch names are rejected."""
        with pytest.raises(ConfigurationError, match="Unknown ablation"):
            apply_ablations(ExperimentSettings(), ["no-such-thing"])
