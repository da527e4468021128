import pytest

from pad_errors import ConfigError
from train_config import (
    TrainConfig, format_config, load_config, override_help, parse_overrides, with_overrides, write_config,
)


def test_defaults():
    cfg = TrainConfig()
    assert cfg.seed == 7
    assert (cfg.phase1.epochs, cfg.phase1.input_size, cfg.phase1.lr, cfg.phase1.batch_size) == (30, 256, 1e-3, 32)
    assert (cfg.phase1.triplet.margin, cfg.phase1.triplet.sigma) == (0.6, 2.0)
    assert (cfg.phase2.epochs, cfg.phase2.input_size) == (20, 64)
    assert (cfg.phase2.triplet.margin, cfg.phase2.triplet.sigma) == (1.0, 1.5)
    assert cfg.attention.k_percent == 50.0
    assert cfg.fusion.mode == "weighted_mlp"
    assert cfg.evaluate.threshold == 0.5
    assert (cfg.synth.n_subjects_live, cfg.synth.n_subjects_attack, cfg.synth.image_size) == (300, 300, 64)
    assert cfg.synth.style_jitter == 0.3


def test_load_ini_with_dotted_keys(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[phase1]\nepochs = 3\ntriplet.margin = 0.4\nuse_csa = false\n\n"
                    "[fusion]\nmode = majority_vote\n", encoding="utf-8")
    cfg = load_config(path)
    assert cfg.phase1.epochs == 3
    assert cfg.phase1.triplet.margin == 0.4
    assert cfg.phase1.use_csa is False
    assert cfg.fusion.mode == "majority_vote"
    assert cfg.phase2.epochs == 20


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[phase1]\nepochs = 3\n", encoding="utf-8")
    cfg = load_config(path, ["phase1.epochs=5", "seed=11"])
    assert cfg.phase1.epochs == 5
    assert cfg.seed == 11


def test_parse_overrides():
    assert parse_overrides(["a.b=1", "seed = 3"]) == [("a.b", "1"), ("run.seed", "3")]
    with pytest.raises(ConfigError):
        parse_overrides(["phase1.epochs"])


@pytest.mark.parametrize("override", [
    "phase1.nope=1", "phase1.epochs=0", "fusion.mode=stacked", "phase1.epochs=abc", "bogus.key=1",
    "synth.style_jitter=1.5", "synth.bogus=1",
])
def test_invalid_values_raise_config_error(override):
    with pytest.raises(ConfigError, match="config"):
        load_config(None, [override])


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    bad = tmp_path / "bad.ini"
    bad.write_text("epochs = 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="parse"):
        load_config(bad)


def test_snapshot_round_trip(tmp_path):
    cfg = with_overrides(TrainConfig(), ["phase1.aiaw.k_live=0.01", "phase2.use_tf=false", "seed=3"])
    again = load_config(write_config(cfg, tmp_path / "config_snapshot"))
    assert again == cfg
    assert "[phase1]" in format_config(cfg)


def test_with_overrides_leaves_original_untouched():
    base = TrainConfig()
    changed = with_overrides(base, ["fusion.epochs=2"])
    assert changed.fusion.epochs == 2
    assert base.fusion.epochs == 20


def test_override_help_lists_every_key():
    text = override_help()
    assert "phase1.epochs=30" in text
    assert "phase1.triplet.margin=0.6" in text
    assert "fusion.mode=weighted_mlp" in text
