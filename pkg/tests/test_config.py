import pytest

from goelan.config import ConfigError, ModelConfig, full_config, overfit_config, preset_config, toy_config
from goelan.network import build_model
from goelan.train import make_optimizer


def test_recipe_defaults():
    cfg = full_config()
    assert (cfg.epochs, cfg.batch_size, cfg.input_size, cfg.close_mosaic) == (20, 8, 640, 15)
    assert (cfg.lr0, cfg.lr_final, cfg.momentum, cfg.weight_decay) == (0.01, 0.01, 0.937, 0.0005)
    assert (cfg.warmup_epochs, cfg.warmup_momentum) == (3.0, 0.8)
    assert (cfg.mosaic, cfg.mixup, cfg.scale, cfg.fliplr, cfg.blur) == (1.0, 0.15, 0.9, 0.5, 0.01)
    assert cfg.label_smoothing == 0.1 and cfg.class_count == 10


def test_ini_round_trip():
    for cfg in (full_config(), toy_config(class_count=3), overfit_config()):
        assert ModelConfig.from_ini(cfg.to_ini()) == cfg


def test_overrides_are_coerced():
    cfg = toy_config().override({"epochs": "7", "double_precision": "yes", "pool_sizes": "3,5", "lr0": "0.02"})
    assert cfg.epochs == 7 and cfg.double_precision is True
    assert cfg.pool_sizes == (3, 5) and cfg.lr0 == 0.02
    nested = cfg.override({"elan_widths": "2,2; 4,4; 8,8; 8,8"})
    assert nested.elan_widths == ((2, 2), (4, 4), (8, 8), (8, 8))


@pytest.mark.parametrize("values", [
    {"no_such_key": "1"},
    {"epochs": "many"},
    {"double_precision": "maybe"},
    {"input_size": "100"},
    {"label_smoothing": "1.0"},
    {"nms_iou": "1.5"},
    {"weight_decay": "-1"},
    {"class_count": "0"},
])
def test_invalid_values_rejected(values):
    with pytest.raises(ConfigError):
        toy_config().override(values)


def test_presets():
    assert preset_config("toy").width_preset == "toy"
    assert preset_config("overfit").mosaic == 0.0
    with pytest.raises(ConfigError):
        preset_config("huge")


def test_stronger_regularization_preset_reaches_optimizer():
    cfg = preset_config("full-reg", class_count=3)
    assert cfg.weight_decay == 0.01
    small = toy_config(class_count=3, weight_decay=cfg.weight_decay)
    decay_group = make_optimizer(build_model(small), small).param_groups[0]
    assert decay_group["weight_decay"] == 0.01


def test_ini_preset_key(tmp_path):
    text = "[model]\npreset = toy\nclass_count = 4\n"
    cfg = ModelConfig.from_ini(text)
    assert cfg.width_preset == "toy" and cfg.class_count == 4
    path = tmp_path / "c.ini"
    path.write_text(text)
    assert ModelConfig.load(path) == cfg
