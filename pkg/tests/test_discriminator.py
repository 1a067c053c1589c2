import pytest
import torch
import torch.nn.functional as F

from drgan.config import DiscConfig
from drgan.discriminator import (
    MultiScaleDiscriminator,
    ScaleDiscriminator,
    build_pyramid,
    receptive_area_fraction,
    receptive_field,
)
from drgan.errors import ValidationError


def test_pyramid_levels():
    x, c = torch.rand(2, 3, 64, 64), torch.rand(2, 8, 64, 64)
    levels = build_pyramid(x, c, 3)
    assert [tuple(l.shape) for l in levels] == [(2, 11, 64, 64), (2, 11, 32, 32), (2, 11, 16, 16)]
    torch.testing.assert_close(levels[0][:, :8], c)
    torch.testing.assert_close(levels[2], F.avg_pool2d(levels[0], 4))


def test_pyramid_rejects_misaligned():
    with pytest.raises(ValidationError):
        build_pyramid(torch.rand(2, 3, 64, 64), torch.rand(2, 8, 32, 32))
    with pytest.raises(ValidationError):
        build_pyramid(torch.rand(2, 3, 64, 64), torch.rand(1, 8, 64, 64))


def test_output_structure():
    cfg = DiscConfig(base_channels=4)
    d = MultiScaleDiscriminator(cfg)
    outs = d(torch.rand(2, 3, 64, 64), torch.rand(2, 8, 64, 64))
    assert len(outs) == 3
    for o in outs:
        assert o.rf_logit.shape == (2,)
        assert o.grade_logits.shape == (2, 5)
        assert [f.shape[1] for f in o.features] == [4, 8, 16, 32]
    assert outs[0].features[0].shape[-1] == 32
    assert outs[2].features[0].shape[-1] == 8


def test_scales_have_separate_parameters():
    d = MultiScaleDiscriminator(DiscConfig(base_channels=4))
    assert d.scales[0].convs[0].weight.data_ptr() != d.scales[1].convs[0].weight.data_ptr()
    assert not torch.equal(d.scales[0].convs[0].weight, d.scales[1].convs[0].weight)


def test_leaky_slope_applied():
    cfg = DiscConfig(base_channels=2, conv_layers=1)
    d = ScaleDiscriminator(cfg, in_channels=1)
    with torch.no_grad():
        d.convs[0].weight.zero_()
        d.convs[0].bias.fill_(-1.0)
    out = d(torch.zeros(1, 1, 8, 8))
    assert torch.allclose(out.features[0], torch.full_like(out.features[0], -0.2))


def test_pyramid_length_checked():
    d = MultiScaleDiscriminator(DiscConfig(base_channels=4))
    with pytest.raises(ValidationError):
        d.discriminate([torch.rand(1, 11, 64, 64)])


def test_receptive_field():
    # 1 + 3 * (1 + 2 + 4 + 8)
    assert receptive_field(DiscConfig()) == 46
    assert receptive_field(DiscConfig(conv_layers=1)) == 4


def test_coarser_scales_see_more():
    cfg = DiscConfig()
    fr = [receptive_area_fraction(cfg, 256, s) for s in range(3)]
    assert fr[0] < fr[1] < fr[2]
    assert fr[1] / fr[0] == pytest.approx(4.0)
    assert fr[2] / fr[0] == pytest.approx(16.0)
