import pytest
import yaml

from cyclempc.config import (ConfigError, DEFAULT_CONFIG, apply_override,
                             build_bounds, build_controller_settings,
                             build_network_spec, build_node_config,
                             build_plant_params, build_reference,
                             build_solver_config, build_train_config,
                             load_config, parse_override,
                             save_config_snapshot)


def test_defaults_load_and_build():
    cfg = load_config()
    assert cfg == DEFAULT_CONFIG
    assert cfg is not DEFAULT_CONFIG
    settings = build_controller_settings(cfg)
    assert settings.horizon == 3
    spec = build_network_spec(cfg)
    assert [l.output_width for l in spec.layers] == [24, 24, 16, 4, 24, 24, 4]
    assert build_train_config(cfg).max_epochs == 150
    assert build_node_config(cfg).budget_s == pytest.approx(0.022)
    assert build_plant_params(cfg).k_fuel == pytest.approx(4.2)
    assert build_reference(cfg).shape == (650, 2)
    assert build_solver_config(cfg).max_sqp_iterations == 3


def test_defaults_are_copied_not_shared():
    a = load_config()
    a["control"]["horizon"] = 99
    assert DEFAULT_CONFIG["control"]["horizon"] == 3
    assert load_config()["control"]["horizon"] == 3


def test_preset_caps_nox():
    cfg = load_config(presets=["nox300"])
    assert cfg["control"]["bounds"]["y_max"][2] == 300.0
    bounds = build_bounds(cfg)
    assert bounds.y_max[2] == 300.0
    with pytest.raises(ConfigError):
        load_config(presets=["no-such-preset"])


def test_override_parsing_and_typing():
    assert parse_override("control.horizon=5") == (("control", "horizon"), 5)
    assert parse_override("plant.k_fuel=4.5") == (("plant", "k_fuel"), 4.5)
    path, val = parse_override("loop.profile.levels=[3.0, 4.0]")
    assert path == ("loop", "profile", "levels")
    assert val == [3.0, 4.0]
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_override_applies_and_validates_paths():
    cfg = load_config(overrides=["control.horizon=5",
                                 "training.max_epochs=10"])
    assert cfg["control"]["horizon"] == 5
    assert cfg["training"]["max_epochs"] == 10
    with pytest.raises(ConfigError):
        load_config(overrides=["control.nope=1"])
    with pytest.raises(ConfigError):
        load_config(overrides=["nope.horizon=1"])


def test_plant_subtree_is_open_but_validated_at_build():
    cfg = load_config(overrides=["plant.nox_gain=500.0"])
    assert build_plant_params(cfg).nox_gain == 500.0
    cfg2 = load_config()
    apply_override(cfg2, ("plant", "bogus_gain"), 1.0)
    with pytest.raises(ConfigError):
        build_plant_params(cfg2)


def test_yaml_file_merge_and_unknown_keys(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(
        {"control": {"horizon": 4}, "data": {"n_cycles": 5000}}))
    cfg = load_config(path)
    assert cfg["control"]["horizon"] == 4
    assert cfg["data"]["n_cycles"] == 5000
    assert cfg["training"]["window"] == 32
    path.write_text(yaml.safe_dump({"controll": {"horizon": 4}}))
    with pytest.raises(ConfigError):
        load_config(path)


def test_snapshot_round_trip(tmp_path):
    cfg = load_config(presets=["nox300"], overrides=["control.horizon=5"])
    snap = tmp_path / "snapshot.yaml"
    save_config_snapshot(cfg, snap)
    again = load_config(snap)
    assert again == cfg
