import pytest

from mmsa.config import DEFAULTS, VARIANTS, Config, ConfigError, ablation_flags, make_ablation


def test_defaults_round_trip_through_text():
    cfg = Config()
    again = Config.from_text(cfg.to_text())
    assert again == cfg
    assert again.content_hash() == cfg.content_hash()


def test_protocol_defaults():
    cfg = Config()
    assert cfg["train.batch_size"] == 32
    assert cfg["train.buffer_size"] == 5000
    assert cfg["train.lr"] == 1e-3
    assert cfg["train.target_update_interval"] == 200
    assert cfg["wm.rollout_horizon"] == 3
    assert cfg["wm.kl_balance_alpha"] == 0.8


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError) as info:
        Config().set("train.learning_rate", 0.1)
    assert "train.lr" in str(info.value)


def test_values_are_typed_by_default():
    cfg = Config.from_text("train.lr = 5e-4\ntrain.total_steps = 1e4\nwm.enabled = off  # comment\n")
    assert cfg["train.lr"] == 5e-4
    assert cfg["train.total_steps"] == 10_000 and isinstance(cfg["train.total_steps"], int)
    assert cfg["wm.enabled"] is False
    assert cfg.overrides == {"train.lr": 5e-4, "train.total_steps": 10_000, "wm.enabled": False}
    with pytest.raises(ConfigError):
        Config().set("train.batch_size", "lots")
    with pytest.raises(ConfigError):
        Config.from_text("just words\n")


def test_optional_values():
    cfg = Config().apply_overrides(["train.stop_return=0.95"])
    assert cfg["train.stop_return"] == 0.95
    assert Config().apply_overrides(["train.stop_return=none"])["train.stop_return"] is None
    with pytest.raises(ConfigError):
        Config().apply_overrides(["train.lr"])


@pytest.mark.parametrize("variant", VARIANTS)
def test_each_ablation_turns_off_exactly_one_switch(variant):
    cfg = make_ablation(Config(), variant)
    flags = ablation_flags(cfg)
    assert sum(flags.values()) == (0 if variant == "full" else 1)
    if variant != "full":
        assert flags[variant]
    assert cfg["train.variant"] == variant


def test_ablation_resets_other_switches():
    cfg = make_ablation(make_ablation(Config(), "no_wm"), "no_sale")
    assert cfg["wm.enabled"] is True and cfg["sale.enabled"] is False
    with pytest.raises(ConfigError):
        make_ablation(Config(), "no_mixer")


def test_every_default_key_is_settable_from_text():
    for key, value in DEFAULTS.items():
        text = Config().to_text()
        assert f"{key} = " in text
