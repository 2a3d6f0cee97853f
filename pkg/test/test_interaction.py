"""Tests for the prototype interaction module."""

import math

import pytest
import torch
import torch.nn.functional as F
from torch import nn

from proto_rectify.errors import ShapeMismatchError
from proto_rectify.model.backbone import FeaturePyramid, MiniVNet
from proto_rectify.model.interaction import (
    CrossAttentionBlock,
    InteractionModule,
    SpatialAggregation,
    block1_update,
    block2_proximity,
    relationship_map,
)
from proto_rectify.settings import AggregationConfig, ModelConfig

TINY_MODEL = ModelConfig(base_channels=2, feature_dim=4, f3_dim=3, f4_dim=2, num_prototypes=2)


def _identity_block(dim: int) -> CrossAttentionBlock:
    block = CrossAttentionBlock(dim, dim, dim)
    with torch.no_grad():
        for linear in (block.query, block.key, block.value):
            linear.weight.copy_(torch.eye(dim))
            linear.bias.zero_()
    return block


def _pyramid(config: ModelConfig, size: int = 8, batch: int = 1, dtype=torch.float32) -> FeaturePyramid:
    return FeaturePyramid(
        f2=torch.randn(batch, config.feature_dim, size // 4, size // 4, size // 4, dtype=dtype),
        f3=torch.randn(batch, config.f3_dim, size // 2, size // 2, size // 2, dtype=dtype),
        f4=torch.randn(batch, config.f4_dim, size, size, size, dtype=dtype),
        logits=torch.randn(batch, 2, size, size, size, dtype=dtype),
    )


def _leaves(module: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone().requires_grad_(True) for name, p in module.named_parameters()}


class TestBlock1:
    def test_hand_example(self):
        """Identity projections: attention (0.6698, 0.3302) over two orthogonal keys."""
        block = _identity_block(2)
        p = torch.tensor([[1.0, 0.0]])
        r2 = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        m, updated = block1_update(block, p, r2)
        assert torch.allclose(m, torch.tensor([[1 / math.sqrt(2), 0.0]]), atol=1e-6)
        assert torch.allclose(updated, torch.tensor([[0.6698, 0.3302]]), atol=1e-4)

    def test_identical_keys_give_uniform_attention(self):
        """Every prototype becomes the shared projected value."""
        block = CrossAttentionBlock(4, 4, 4)
        r2 = torch.randn(1, 4).expand(5, 4)
        _, updated = block1_update(block, torch.randn(3, 4), r2)
        expected = block.value(r2[:1]).expand(3, 4)
        assert torch.allclose(updated, expected, atol=1e-6)

    def test_attention_rows_sum_to_one(self):
        block = CrossAttentionBlock(4, 4, 4)
        scores = block.scores(torch.randn(3, 4), torch.randn(7, 4))
        assert torch.allclose(F.softmax(scores, dim=-1).sum(dim=-1), torch.ones(3), atol=1e-6)

    def test_dimension_mismatch(self):
        """Keys of the wrong width are rejected."""
        block = CrossAttentionBlock(4, 4, 4)
        with pytest.raises(ShapeMismatchError):
            block1_update(block, torch.randn(2, 4), torch.randn(5, 3))

    def test_gradient_matches_finite_differences(self):
        """Both outputs are differentiable in prototypes and features."""
        block = CrossAttentionBlock(3, 3, 3).double()
        p = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
        r2 = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda a, b: block1_update(block, a, b), (p, r2))


class TestBlock2:
    """Proximity is a bare scaled dot product between projected queries and keys."""

    def _bias_free(self) -> CrossAttentionBlock:
        block = CrossAttentionBlock(4, 3, 3, with_values=False)
        with torch.no_grad():
            block.query.bias.zero_()
            block.key.bias.zero_()
        return block

    def test_zero_queries(self):
        """Zero prototypes without biases have zero proximity everywhere."""
        proximity = block2_proximity(self._bias_free(), torch.zeros(2, 4), torch.randn(6, 3))
        assert torch.equal(proximity, torch.zeros(2, 6))

    def test_linear_in_keys(self):
        block = self._bias_free()
        p, r3 = torch.randn(2, 4), torch.randn(6, 3)
        assert torch.allclose(block2_proximity(block, p, 2.5 * r3), 2.5 * block2_proximity(block, p, r3), atol=1e-5)

    def test_matches_naive_matmul(self):
        """Element-wise q·k / sqrt(d) reproduces the batched product."""
        block = CrossAttentionBlock(2, 2, 2, with_values=False)
        p, r3 = torch.randn(2, 2), torch.randn(2, 2)
        q = p @ block.query.weight.T + block.query.bias
        k = r3 @ block.key.weight.T + block.key.bias
        expected = torch.tensor([[float(q[i] @ k[j]) / math.sqrt(2) for j in range(2)] for i in range(2)])
        assert torch.allclose(block2_proximity(block, p, r3), expected, atol=1e-6)

    def test_has_no_value_projection(self):
        block = CrossAttentionBlock(4, 3, 3, with_values=False)
        with pytest.raises(ShapeMismatchError):
            block.attend(torch.randn(2, 4), torch.randn(6, 3))

    def test_gradient_matches_finite_differences(self):
        """Proximity is differentiable in prototypes, features and both projections."""
        block = CrossAttentionBlock(4, 3, 3, with_values=False).double()
        p = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        r3 = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda a, b: block2_proximity(block, a, b), (p, r3))

        wrapped = _Proximity(block)
        params = _leaves(wrapped)
        names = sorted(params)

        def by_params(*values: torch.Tensor) -> torch.Tensor:
            return torch.func.functional_call(wrapped, dict(zip(names, values)), (p.detach(), r3.detach()))

        assert torch.autograd.gradcheck(by_params, tuple(params[name] for name in names))


class _Proximity(nn.Module):
    def __init__(self, block: CrossAttentionBlock):
        super().__init__()
        self.block = block

    def forward(self, p: torch.Tensor, r3: torch.Tensor) -> torch.Tensor:
        return block2_proximity(self.block, p, r3)


class TestSpatialAggregation:
    def _trivial(self, classes: int, sets: int) -> SpatialAggregation:
        aggregation = SpatialAggregation(classes, sets)
        with torch.no_grad():
            kernel = torch.zeros_like(aggregation.spatial.weight)
            for channel in range(sets):
                kernel[channel, channel, 1, 1, 1] = 1.0
            aggregation.spatial.weight.copy_(kernel)
            aggregation.spatial.bias.zero_()
            aggregation.integrate.weight.fill_(1 / sets)
            aggregation.integrate.bias.zero_()
        return aggregation

    def test_trivial_weights_average_over_sets(self):
        """Centre-tap spatial kernel and 1/R integration give the mean over sets, upsampled."""
        proximity = torch.randn(2, 3, 4, 4, 4, 4)
        out = self._trivial(3, 4)(proximity)
        expected = F.interpolate(proximity.mean(dim=2), scale_factor=2, mode="trilinear", align_corners=False)
        assert out.shape == (2, 3, 8, 8, 8)
        assert torch.allclose(out, expected, atol=1e-5)

    def test_constant_field_stays_constant(self):
        aggregation = SpatialAggregation(2, 3, AggregationConfig(spatial_awareness=False))
        with torch.no_grad():
            aggregation.integrate.bias.zero_()
        out = aggregation(torch.full((1, 2, 3, 4, 4, 4), 0.7))
        for c in range(2):
            assert torch.allclose(out[0, c], out[0, c].flatten()[0].expand_as(out[0, c]), atol=1e-6)

    def test_class_permutation_equivariance(self):
        """Shared weights treat every class alike."""
        aggregation = SpatialAggregation(3, 2)
        proximity = torch.randn(1, 3, 2, 4, 4, 4)
        perm = torch.tensor([2, 0, 1])
        assert torch.allclose(aggregation(proximity[:, perm]), aggregation(proximity)[:, perm], atol=1e-5)

    def test_direct_summation_path(self):
        """All switches off reduces to summation over sets."""
        plain = SpatialAggregation(2, 3, AggregationConfig(spatial_awareness=False, conv_integration=False, cross_class=False))
        proximity = torch.randn(1, 2, 3, 4, 4, 4)
        expected = F.interpolate(proximity.sum(dim=2), scale_factor=2, mode="trilinear", align_corners=False)
        assert torch.allclose(plain(proximity), expected, atol=1e-5)
        assert not torch.allclose(SpatialAggregation(2, 3)(proximity), expected, atol=1e-3)

    def test_per_class_weights_without_cross_class(self):
        """Without cross-class sharing every class gets its own kernels."""
        aggregation = SpatialAggregation(2, 3, AggregationConfig(cross_class=False))
        assert aggregation.spatial.weight.shape == (6, 3, 3, 3, 3)
        assert aggregation.integrate.weight.shape == (2, 3, 1, 1, 1)
        assert aggregation(torch.randn(1, 2, 3, 4, 4, 4)).shape == (1, 2, 8, 8, 8)

    def test_set_count_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            SpatialAggregation(2, 4)(torch.randn(1, 2, 3, 4, 4, 4))

    @pytest.mark.parametrize("cross_class", [True, False])
    def test_gradient_matches_finite_differences(self, cross_class):
        """Aggregation is differentiable in its input and in its own convolution weights."""
        aggregation = SpatialAggregation(2, 2, AggregationConfig(cross_class=cross_class)).double()
        proximity = torch.randn(1, 2, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(aggregation, (proximity,))

        params = _leaves(aggregation)
        names = sorted(params)

        def by_params(*values: torch.Tensor) -> torch.Tensor:
            return torch.func.functional_call(aggregation, dict(zip(names, values)), (proximity.detach(),))

        assert torch.autograd.gradcheck(by_params, tuple(params[name] for name in names))


class TestInteractionModule:
    def test_relationship_map_shape(self):
        """R = 4 proximity maps at half resolution, one map per class at full resolution."""
        config = ModelConfig(num_prototypes=4)
        backbone = MiniVNet(config, num_classes=2)
        module = InteractionModule(config, num_classes=2)
        pyramid = backbone(torch.randn(1, 1, 32, 32, 32))
        assert module.proximities(pyramid).shape == (1, 2, 4, 16, 16, 16)
        assert relationship_map(module, pyramid).shape == (1, 2, 32, 32, 32)

    def test_default_prototype_count(self):
        assert InteractionModule(ModelConfig(), 2).bank.prototypes.shape == (2, 16, 32)

    def test_finite_under_large_inputs(self):
        """Saturated features still give finite maps."""
        module = InteractionModule(TINY_MODEL, num_classes=2)
        pyramid = _pyramid(TINY_MODEL, batch=2)
        for name in ("f2", "f3", "f4"):
            setattr(pyramid, name, getattr(pyramid, name).uniform_(-10, 10))
        assert torch.isfinite(module(pyramid)).all()

    def test_prototype_gradient_matches_finite_differences(self):
        """The prototype bank receives correct gradients through both blocks and aggregation."""
        module = InteractionModule(TINY_MODEL, num_classes=2).double()
        pyramid = _pyramid(TINY_MODEL, dtype=torch.float64)
        weights = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
        prototypes = module.bank.prototypes.detach().clone().requires_grad_(True)

        def score(p: torch.Tensor) -> torch.Tensor:
            out = torch.func.functional_call(module, {"bank.prototypes": p}, (pyramid,))
            return (out * weights).sum()

        assert torch.autograd.gradcheck(score, (prototypes,), eps=1e-6, atol=1e-4)

    def test_end_to_end_gradient_matches_finite_differences(self):
        """Input gradients through backbone and interaction module."""
        backbone = MiniVNet(TINY_MODEL, num_classes=2).double()
        module = InteractionModule(TINY_MODEL, num_classes=2).double()
        weights = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
        x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(lambda v: (module(backbone(v)) * weights).sum(), (x,), eps=1e-6, atol=1e-4)

    def test_bank_is_a_parameter(self):
        module = InteractionModule(TINY_MODEL, num_classes=2)
        assert isinstance(module.bank.prototypes, nn.Parameter)
        assert module.bank.p(1).shape == (2, 4)
        assert module.bank.class_means().shape == (2, 4)
