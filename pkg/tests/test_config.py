import json

import pytest

from drgan.config import (
    Ablation,
    GeneratorConfig,
    TrainConfig,
    from_flat,
    load_config,
    parse_overrides,
    save_config,
    smoke_config,
    to_flat,
)
from drgan.errors import ConfigurationError


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.lr_gan, cfg.lr_pretrain, cfg.beta1) == (1e-4, 1e-3, 0.5)
    assert (cfg.loss.lambda1, cfg.loss.lambda2, cfg.loss.lambda3) == (10.0, 10.0, 1.0)
    assert cfg.generator.sca_reductions == (8, 16, 32)
    assert cfg.disc.n_scales == 3 and cfg.disc.conv_layers == 4
    assert GeneratorConfig(base_channels=8).block_widths == (64, 32, 16, 8)


def test_flat_round_trip(tmp_path):
    cfg = smoke_config(seed=3)
    assert from_flat(to_flat(cfg)) == cfg
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_override_coercion():
    cfg = from_flat(parse_overrides(["lr_gan=0.002", "ablation.no_sca=true", "generator.sca_reductions=[4,4,4]"]))
    assert cfg.lr_gan == 0.002
    assert cfg.ablation.no_sca is True
    assert cfg.generator.sca_reductions == (4, 4, 4)


@pytest.mark.parametrize(
    "flat",
    [
        {"nope": 1},
        {"lr_gan": 0},
        {"epochs_stage1": 0},
        {"generator.full_resolution": 72},
        {"loss.lambda1": -1},
        {"ablation.no_cls": "maybe"},
        {"batch_gan": "four"},
    ],
)
def test_invalid_configs(flat):
    with pytest.raises(ConfigurationError):
        from_flat(flat)


def test_parse_overrides_requires_equals():
    with pytest.raises(ConfigurationError):
        parse_overrides(["lr_gan"])


def test_profile_then_file_then_overrides(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 5, "batch_gan": 2}))
    cfg = load_config(tmp_path / "c.json", {"seed": "9"}, "smoke")
    assert cfg.resolution == 64
    assert cfg.batch_gan == 2
    assert cfg.seed == 9


def test_bad_profile_and_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(profile="huge")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.json")


def test_ablation_names():
    assert Ablation.names() == ["no_lesion_masks", "no_agm", "no_perceptual", "no_cls", "no_sca"]
