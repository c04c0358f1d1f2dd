import dataclasses

import pytest

from cmseg.config import (ConfigError, TrainConfig, apply_override, config_from_dict, dump_config, load_config,
                          save_config)

ROOT_CONFIG = __import__("pathlib").Path(__file__).resolve().parents[1] / "configs" / "compare.ini"


def test_overrides_reach_every_section():
    cfg = TrainConfig()
    apply_override(cfg, "model.hidden=32")
    apply_override(cfg, "train.epochs=7")
    apply_override(cfg, "peak_lr=0.02")
    apply_override(cfg, "loss.focal_gamma=1.5")
    apply_override(cfg, "betas=0.8, 0.9")
    apply_override(cfg, "deterministic=off")
    assert (cfg.model.hidden, cfg.epochs, cfg.peak_lr, cfg.loss.focal_gamma) == (32, 7, 0.02, 1.5)
    assert cfg.betas == (0.8, 0.9) and cfg.deterministic is False


@pytest.mark.parametrize("bad", ["epochs", "nosuch.key=1", "model.nosuch=1", "epochs=abc", "deterministic=maybe",
                                 "model=1"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        apply_override(TrainConfig(), bad)


def test_ini_roundtrip(tmp_path):
    cfg = load_config(ROOT_CONFIG, ["seed=3", "manifest=/data/m.txt"])
    assert cfg.model.input_size == 24 and cfg.seed == 3
    path = tmp_path / "c.ini"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg and back.hash() == cfg.hash()
    assert dump_config(back) == dump_config(cfg)
    assert config_from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_hash_ignores_locations_only():
    cfg = TrainConfig()
    moved = dataclasses.replace(cfg, out_dir="/elsewhere", manifest="m.txt", source_checkpoint="s.ckpt")
    assert moved.hash() == cfg.hash()
    assert dataclasses.replace(cfg, seed=1).hash() != cfg.hash()
    other = TrainConfig()
    other.model.hidden = 32
    assert other.hash() != cfg.hash()


@pytest.mark.parametrize("change", [
    {"protocol": "nope"}, {"warmup_fraction": 0.05}, {"epochs": 0}, {"samples_per_batch": 0}, {"peak_lr": 0.0},
    {"weight_decay": -1.0}, {"grad_clip": -1.0}, {"betas": (0.9,)}, {"betas": (0.9, 1.0)},
    {"modality_sampling": "random"}, {"overlap": 1.0}, {"precision": "f16"}, {"protocol": "fine-tune"},
    {"target_modality": 0},
])
def test_validation_errors(change):
    with pytest.raises(ConfigError):
        dataclasses.replace(TrainConfig(), **change).validate()


def test_loss_weight_validation():
    cfg = TrainConfig()
    cfg.loss.lambda_dice = 0.0
    with pytest.raises(ConfigError):
        cfg.validate()


@pytest.mark.parametrize("w", [0.02, 0.04, 0.06])
def test_allowed_warmup_fractions(w):
    dataclasses.replace(TrainConfig(), warmup_fraction=w).validate()
