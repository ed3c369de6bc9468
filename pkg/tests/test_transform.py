import numpy as np
import pytest
import torch

from crossreid.backbone import (
    BackboneConfig,
    FeatureMap,
    StreamTag,
    TwoStreamBackbone,
    count_parameters,
)
from crossreid.errors import ContractError, ShapeError
from crossreid.transform import (
    FeatureTransformer,
    TransformConfig,
    channel_split,
    transform_loss,
)


def make_transformer(channels=256, **kwargs):
    return FeatureTransformer(TransformConfig(channels=channels, **kwargs))


class TestChannelSplit:
    def test_halves_preserve_order(self):
        x = torch.arange(8, dtype=torch.float32).reshape(1, 8, 1, 1)
        a, b = channel_split(x)
        np.testing.assert_array_equal(a.flatten().numpy(), [0, 1, 2, 3])
        np.testing.assert_array_equal(b.flatten().numpy(), [4, 5, 6, 7])

    def test_odd_channels_rejected(self):
        with pytest.raises(ShapeError):
            channel_split(torch.zeros(1, 7, 2, 2))


class TestConfig:
    def test_inner_default_narrow(self):
        assert TransformConfig(channels=256).inner_channels == 16
        assert TransformConfig(channels=2048).inner_channels == 64

    def test_indivisible_inner_rejected(self):
        with pytest.raises(ShapeError):
            TransformConfig(channels=64, inner_channels=12, num_inner_steps=3)


class TestForward:
    def test_shape_preserved_and_tag_rewritten(self):
        tr = make_transformer(64)
        fmap = FeatureMap(torch.randn(2, 64, 8, 4), StreamTag.F_SYNTH_LR)
        out = tr(fmap)
        assert out.values.shape == (2, 64, 8, 4)
        assert out.tag == StreamTag.F_SYNTH_HR

    def test_accepts_real_lr(self):
        tr = make_transformer(32)
        out = tr(FeatureMap(torch.randn(1, 32, 4, 4), StreamTag.F_LR))
        assert out.tag == StreamTag.F_SYNTH_HR

    def test_rejects_hr_input(self):
        tr = make_transformer(32)
        for tag in (StreamTag.F_HR, StreamTag.F_SYNTH_HR):
            with pytest.raises(ContractError):
                tr(FeatureMap(torch.randn(1, 32, 4, 4), tag))

    def test_rejects_channel_mismatch(self):
        tr = make_transformer(32)
        with pytest.raises(ShapeError):
            tr(FeatureMap(torch.randn(1, 64, 4, 4), StreamTag.F_LR))

    def test_gradient_reaches_every_parameter(self):
        tr = make_transformer(32, num_blocks=2)
        fmap = FeatureMap(torch.randn(2, 32, 4, 4), StreamTag.F_SYNTH_LR)
        tr(fmap).values.sum().backward()
        assert all(p.grad is not None and torch.isfinite(p.grad).all()
                   for p in tr.parameters())

    def test_spatial_size_agnostic(self):
        tr = make_transformer(32)
        for h, w in ((4, 4), (16, 8), (7, 5)):
            out = tr(FeatureMap(torch.randn(1, 32, h, w), StreamTag.F_LR))
            assert out.values.shape == (1, 32, h, w)


class TestParameterBudget:
    @pytest.mark.parametrize("backbone_variant,channels", [("tiny", 256)])
    def test_under_ten_percent_of_backbone(self, backbone_variant, channels):
        backbone = TwoStreamBackbone(BackboneConfig(variant=backbone_variant))
        tr = make_transformer(channels)
        ratio = count_parameters(tr) / count_parameters(backbone)
        assert ratio <= 0.10, f"transform/backbone parameter ratio {ratio:.3f}"

    def test_full_scale_budget(self):
        backbone = TwoStreamBackbone(BackboneConfig(variant="full_scale"))
        tr = make_transformer(2048)
        ratio = count_parameters(tr) / count_parameters(backbone)
        assert ratio <= 0.10, f"transform/backbone parameter ratio {ratio:.3f}"


class TestTransformLoss:
    def test_hand_value(self):
        target = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
        pred = torch.tensor([1.0, 1.0, 3.0, 3.0]).reshape(1, 1, 2, 2)
        assert abs(float(transform_loss(target, pred)) - 0.5) < 1e-12

    def test_zero_at_identity(self):
        x = torch.randn(2, 8, 4, 4)
        assert float(transform_loss(x, x.clone())) == 0.0

    def test_symmetric(self):
        a, b = torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3)
        assert abs(float(transform_loss(a, b)) - float(transform_loss(b, a))) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            transform_loss(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 3))
