"""Tests for the teacher/student loop, moving average, schedule and checkpoints."""

import copy
import json

import numpy as np
import pytest
import torch
from torch import nn

from proto_rectify.data.loader import sample_batch
from proto_rectify.errors import ConfigurationError, ContractViolation, CorruptFileError, DataError, NumericalError
from proto_rectify.model.losses import supervised_loss, unsupervised_loss
from proto_rectify.training import (
    ModelPair,
    Trainer,
    align_batch,
    collect_checkpoint,
    interaction_trained,
    ema_update,
    list_checkpoints,
    load_checkpoint,
    make_teacher,
    poly_lr,
    rectification_active,
    restore_pair,
    save_checkpoint,
    set_lr,
    teacher_targets,
    train_step,
)
from proto_rectify.training.trainer import METRICS_NAME


class TestEma:
    def _linear(self, value: float) -> nn.Linear:
        layer = nn.Linear(3, 2).double()
        with torch.no_grad():
            for param in layer.parameters():
                param.fill_(value)
        return layer

    def test_single_update(self):
        """One step with α = 0.99 moves 1% of the way."""
        teacher, student = self._linear(0.0), self._linear(1.0)
        ema_update(teacher, student, 0.99)
        assert torch.allclose(teacher.weight, torch.full_like(teacher.weight, 0.01))

    def test_closed_form(self):
        """Fifty steps match the geometric closed form."""
        teacher, student = self._linear(0.3), self._linear(1.0)
        alpha = 0.9
        for _ in range(50):
            ema_update(teacher, student, alpha)
        expected = 1.0 * (1 - alpha**50) + 0.3 * alpha**50
        assert torch.allclose(teacher.weight, torch.full_like(teacher.weight, expected), atol=1e-10)

    def test_alpha_one_freezes_teacher(self):
        """α = 1 leaves the teacher untouched."""
        teacher, student = self._linear(0.5), self._linear(1.0)
        ema_update(teacher, student, 1.0)
        assert torch.equal(teacher.weight, torch.full_like(teacher.weight, 0.5))

    def test_mismatched_modules(self):
        """Architectures must agree parameter by parameter."""
        with pytest.raises(ContractViolation):
            ema_update(nn.Linear(3, 2), nn.Linear(3, 4), 0.99)

    def test_teacher_is_frozen_copy(self):
        """The teacher never receives gradients."""
        student = self._linear(1.0)
        teacher = make_teacher(student)
        assert all(not p.requires_grad for p in teacher.parameters())
        assert all(p.requires_grad for p in student.parameters())


class TestSchedule:
    def test_poly_lr(self):
        """lr0 · (1 - i / max_iters)^0.9, clipped at zero past the end."""
        assert poly_lr(0, 100, 2.5e-3) == pytest.approx(2.5e-3)
        assert poly_lr(100, 100, 2.5e-3) == 0.0
        assert poly_lr(50, 100, 1.0) == pytest.approx(0.5359, abs=1e-4)
        assert poly_lr(150, 100, 1.0) == 0.0

    def test_strictly_decreasing(self):
        """The rate falls at every iteration."""
        rates = [poly_lr(i, 20, 1.0) for i in range(21)]
        assert all(a > b for a, b in zip(rates, rates[1:]))

    def test_set_lr(self):
        optimizer = torch.optim.SGD(nn.Linear(2, 2).parameters(), lr=1.0)
        set_lr(optimizer, 0.25)
        assert optimizer.param_groups[0]["lr"] == 0.25


class TestTeacherTargets:
    def test_no_rectification_before_start(self, tiny_settings, tiny_split):
        """At the start iteration itself the target is the plain teacher map."""
        settings = tiny_settings.with_overrides({"rectify.start_iter": 5})
        pair = ModelPair(settings)
        plain, target, active = teacher_targets(pair, sample_batch(tiny_split, 5, settings))
        assert not active
        assert target is plain

    def test_rectification_after_start(self, tiny_settings, tiny_split):
        """Past the start iteration targets change and stay distributions."""
        pair = ModelPair(tiny_settings)
        plain, target, active = teacher_targets(pair, sample_batch(tiny_split, 2, tiny_settings))
        assert active
        assert not torch.equal(plain, target)
        assert torch.allclose(target.sum(dim=1), torch.ones_like(target.sum(dim=1)), atol=1e-5)

    def test_fixed_unit_mu_is_a_no_op(self, tiny_settings, tiny_split):
        """μ fixed at 1 never counts as rectification."""
        settings = tiny_settings.with_overrides({"rectify.fixed_mu": 1.0})
        pair = ModelPair(settings)
        _, _, active = teacher_targets(pair, sample_batch(tiny_split, 3, settings))
        assert not active

    def test_rectification_window(self, tiny_settings):
        """Rectification is active strictly after the start iteration, and never when disabled."""
        assert not rectification_active(tiny_settings, 1)
        assert rectification_active(tiny_settings, 2)
        assert not rectification_active(tiny_settings.with_overrides({"rectify.start_iter": None}), 10**6)
        assert not rectification_active(tiny_settings.with_overrides({"rectify.enabled": False}), 10)


class TestTrainStep:
    """One iteration follows teacher inference, main step, coefficient step, moving average."""

    def test_runs_every_term(self, tiny_settings, tiny_split):
        """With everything on, every loss term is computed and finite."""
        pair = ModelPair(tiny_settings)
        result = train_step(pair, sample_batch(tiny_split, 2, tiny_settings))
        assert result.rectified
        assert result.loss_dim is not None
        assert result.loss_mu is not None
        assert result.loss_cps is not None
        assert np.isfinite(result.loss_total)
        assert result.teacher_grad_norm == 0.0
        assert result.pseudo_dice_before is not None
        assert result.record()["kind"] == "train"

    def test_interaction_trained_only_when_it_can_rectify(self, tiny_settings):
        """The interaction loss runs only if rectification can ever act."""
        assert interaction_trained(ModelPair(tiny_settings))
        for overrides in ({"rectify.enabled": False}, {"rectify.start_iter": None}, {"rectify.fixed_mu": 1.0}):
            assert not interaction_trained(ModelPair(tiny_settings.with_overrides(overrides))), overrides

    def test_coefficient_moves(self, tiny_settings, tiny_split):
        """The coefficient step updates μ."""
        pair = ModelPair(tiny_settings)
        train_step(pair, sample_batch(tiny_split, 2, tiny_settings))
        assert pair.mu() != 0.5

    def test_prototype_bridge_is_fixed(self, tiny_settings, tiny_split):
        """The bridge keeps its initial weights while the prototypes it maps are trained."""
        pair = ModelPair(tiny_settings)
        bridge = copy.deepcopy(pair.student.bridge.state_dict())
        prototypes = pair.student.bank.prototypes.detach().clone()
        train_step(pair, sample_batch(tiny_split, 2, tiny_settings))
        assert not any(p.requires_grad for p in pair.student.bridge.parameters())
        for name, value in pair.student.bridge.state_dict().items():
            assert torch.equal(value, bridge[name]), name
        assert not torch.equal(pair.student.bank.prototypes, prototypes)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"rectify.enabled": False, "contrast.enabled": False, "augment.use_strong": False},
            {
                "rectify.fixed_mu": 1.0,
                "rectify.start_iter": None,
                "contrast.weight": 0.0,
                "augment.use_strong": False,
            },
        ],
        ids=["components-off", "unit-mu-never-rectify"],
    )
    def test_baseline_matches_plain_mean_teacher(self, tiny_settings, tiny_split, overrides):
        """With nothing able to change a pseudo-label, a step is bit-identical to plain mean teacher."""
        settings = tiny_settings.with_overrides(overrides)
        pair = ModelPair(settings)
        student, teacher = copy.deepcopy(pair.student), copy.deepcopy(pair.teacher)
        train = settings.train
        optimizer = torch.optim.SGD(
            student.parameters(), lr=train.lr0, momentum=train.momentum, weight_decay=train.weight_decay
        )
        batch = sample_batch(tiny_split, 3, settings)

        result = train_step(pair, batch)

        with torch.no_grad():
            target = teacher(torch.from_numpy(batch.weak_images)).probabilities
        target = torch.from_numpy(align_batch(target.numpy(), batch))
        probs = student(torch.from_numpy(np.concatenate([batch.labelled_images, batch.strong_images]))).probabilities
        labels = torch.from_numpy(batch.labelled_labels)
        n = len(labels)
        loss = supervised_loss(probs[:n], labels)
        loss = loss + unsupervised_loss(probs[n:], target, train.tau)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        set_lr(optimizer, poly_lr(3, train.max_iters, train.lr0, train.poly_power))
        optimizer.step()
        ema_update(teacher, student, train.ema_decay)

        assert result.loss_total == float(loss)
        for (name, a), (_, b) in zip(pair.student.state_dict().items(), student.state_dict().items()):
            assert torch.equal(a, b), name
        for (name, a), (_, b) in zip(pair.teacher.state_dict().items(), teacher.state_dict().items()):
            assert torch.equal(a, b), name

    def test_deterministic(self, tiny_settings, tiny_split):
        """Identical pairs stay identical step after step."""
        pairs = [ModelPair(tiny_settings), ModelPair(tiny_settings)]
        for iteration in range(3):
            batch = sample_batch(tiny_split, iteration, tiny_settings)
            losses = [train_step(pair, batch).loss_total for pair in pairs]
            assert losses[0] == losses[1]
        a, b = (pair.state_arrays() for pair in pairs)
        assert all(np.array_equal(a[name], b[name]) for name in a)

    def test_non_finite_loss(self, tiny_settings, tiny_split):
        """A NaN loss stops the step before any update."""
        pair = ModelPair(tiny_settings)
        with torch.no_grad():
            pair.student.backbone.head.bias.fill_(float("nan"))
        with pytest.raises(NumericalError):
            train_step(pair, sample_batch(tiny_split, 0, tiny_settings))


class TestCheckpoint:
    def test_state_arrays_keep_parameter_shapes(self, tiny_settings):
        """Scalar parameters such as the correction coefficient stay zero-dimensional."""
        pair = ModelPair(tiny_settings)
        arrays = pair.state_arrays()
        assert arrays["rectifier.coefficient.raw"].shape == ()
        for prefix, module in (("student", pair.student), ("rectifier", pair.rectifier)):
            for name, value in module.state_dict().items():
                assert arrays[f"{prefix}.{name}"].shape == tuple(value.shape), name

    def test_restore_fresh_pair(self, tmp_path, tiny_settings):
        """An untrained pair survives save, load and restore."""
        pair = ModelPair(tiny_settings)
        save_checkpoint(collect_checkpoint(pair, 0), tmp_path)
        restored = restore_pair(load_checkpoint(tmp_path))
        assert restored.mu() == pytest.approx(pair.mu())

    def test_round_trip(self, tmp_path, tiny_settings, tiny_split):
        """Every array, momentum buffers included, comes back unchanged."""
        pair = ModelPair(tiny_settings)
        train_step(pair, sample_batch(tiny_split, 2, tiny_settings))
        save_checkpoint(collect_checkpoint(pair, 3), tmp_path / "ck")
        checkpoint = load_checkpoint(tmp_path / "ck")
        assert checkpoint.iteration == 3
        assert checkpoint.manifest.mu == pytest.approx(pair.mu())
        restored = restore_pair(checkpoint)
        before, after = pair.state_arrays(), restored.state_arrays()
        assert sorted(before) == sorted(after)
        assert all(np.array_equal(before[name], after[name]) for name in before)
        assert any(name.startswith("optim.") for name in after)

    def test_missing_checkpoint(self, tmp_path):
        """An empty directory is a data error."""
        with pytest.raises(DataError):
            load_checkpoint(tmp_path)

    def test_truncated_archive(self, tmp_path, tiny_settings):
        """A truncated archive is reported as corrupt."""
        save_checkpoint(collect_checkpoint(ModelPair(tiny_settings), 0), tmp_path)
        archive = tmp_path / "checkpoint.npz"
        archive.write_bytes(archive.read_bytes()[:100])
        with pytest.raises(CorruptFileError):
            load_checkpoint(tmp_path)

    def test_incompatible_settings(self, tmp_path, tiny_settings):
        """Arrays for a different architecture are refused."""
        save_checkpoint(collect_checkpoint(ModelPair(tiny_settings), 0), tmp_path)
        other = tiny_settings.with_overrides({"model.num_prototypes": 3})
        with pytest.raises(CorruptFileError):
            restore_pair(load_checkpoint(tmp_path), other)

    def test_list_checkpoints_in_order(self, tmp_path, tiny_settings):
        """Checkpoints sort by iteration, not by name."""
        pair = ModelPair(tiny_settings)
        for iteration in (20, 5, 10):
            save_checkpoint(collect_checkpoint(pair, iteration), tmp_path / f"c{iteration}")
        assert [p.name for p in list_checkpoints(tmp_path)] == ["c5", "c10", "c20"]


class TestTrainer:
    def test_fit_writes_run_directory(self, tmp_path, tiny_settings, tiny_split):
        """A short run leaves metrics, periodic and final checkpoints."""
        settings = tiny_settings.with_overrides({"train.checkpoint_every": 2, "train.eval_every": 4})
        results = Trainer(settings, tiny_split, tmp_path, progress=False).fit()
        assert [r.iteration for r in results] == [0, 1, 2, 3]
        records = [json.loads(line) for line in (tmp_path / METRICS_NAME).read_text().splitlines()]
        assert [r["kind"] for r in records] == ["train"] * 4 + ["eval"]
        assert 0 <= records[-1]["dice"] <= 1
        assert (tmp_path / "checkpoint" / "checkpoint.npz").is_file()
        assert (tmp_path / "checkpoints" / "iter_000002" / "checkpoint.json").is_file()
        assert not any(r.rectified for r in results[:2])
        assert all(r.rectified for r in results[2:])

    @pytest.mark.slow
    def test_resume_reproduces_next_step(self, tmp_path, tiny_settings, tiny_split):
        """Stopping and resuming matches an uninterrupted run."""
        settings = tiny_settings.with_overrides({"train.max_iters": 3})
        straight = Trainer(settings, tiny_split, tmp_path / "a", progress=False).fit()

        Trainer(settings, tiny_split, tmp_path / "b", progress=False).fit(stop=2)
        resumed = Trainer.resume(tmp_path / "b" / "checkpoint", tiny_split, tmp_path / "b", progress=False).fit()

        assert [r.iteration for r in resumed] == [2]
        assert resumed[0].loss_total == pytest.approx(straight[2].loss_total, rel=1e-5)
        assert resumed[0].mu == pytest.approx(straight[2].mu, rel=1e-5)

    def test_class_count_mismatch(self, tmp_path, tiny_settings, tiny_split):
        """Data and settings must agree on the class count."""
        settings = tiny_settings.with_overrides({"data.num_classes": 3})
        with pytest.raises(ConfigurationError, match="classes"):
            Trainer(settings, tiny_split, tmp_path)

    def test_evaluate(self, tmp_path, tiny_settings, tiny_split):
        """Validation reports every metric."""
        summary = Trainer(tiny_settings, tiny_split, tmp_path, progress=False).evaluate()
        assert set(summary) >= {"dice", "jaccard", "asd", "hd95"}

    def test_seeds_torch_and_enables_deterministic_kernels(self, tmp_path, tiny_settings, tiny_split):
        """Construction seeds torch's global generator with the run seed."""
        settings = tiny_settings.with_overrides({"seed": 7})
        try:
            Trainer(settings, tiny_split, tmp_path, progress=False)
            assert torch.initial_seed() == 7
            assert torch.are_deterministic_algorithms_enabled()
        finally:
            torch.use_deterministic_algorithms(False)

    @pytest.mark.slow
    def test_same_seed_same_metrics_log(self, tmp_path, tiny_settings, tiny_split):
        """Two runs with one seed write byte-identical metrics logs, evaluation records included."""
        settings = tiny_settings.with_overrides({"train.eval_every": 2, "train.prefetch_workers": 2})
        for name in ("a", "b"):
            Trainer(settings, tiny_split, tmp_path / name, progress=False).fit()
        first = (tmp_path / "a" / METRICS_NAME).read_bytes()
        assert b'"kind":"eval"' in first
        assert first == (tmp_path / "b" / METRICS_NAME).read_bytes()

    @pytest.mark.slow
    def test_mu_rises_over_training(self, tmp_path, tiny_settings, tiny_split):
        """The learnt coefficient is lower at iteration 200 than at the end of the run."""
        settings = tiny_settings.with_overrides({"train.max_iters": 400, "rectify.start_iter": 100})
        Trainer(settings, tiny_split, tmp_path, progress=False).fit()
        records = [json.loads(line) for line in (tmp_path / METRICS_NAME).read_text().splitlines()]
        mu = {r["iteration"]: r["mu"] for r in records if r["kind"] == "train"}
        assert mu[200] < mu[399]
