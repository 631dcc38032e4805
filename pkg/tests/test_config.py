import copy

import pytest

from fogguard.config import (
    ConfigError,
    build_graph,
    config_hash,
    load_config,
    load_data,
    reliability_settings,
    training_config,
    validate_config,
)


@pytest.mark.parametrize("name", ["health", "health_synthetic", "camera"])
def test_shipped_configs_validate(name):
    cfg = load_config(name)
    assert validate_config(cfg) == []
    assert set(reliability_settings(cfg)) == {"no_failure", "normal", "poor", "hazardous"}


def test_shipped_graphs():
    health, camera = load_config("health"), load_config("camera")
    assert not build_graph(health, "vanilla").skip_connections
    assert len(build_graph(health, "deepfogguard").skip_connections) == 3
    assert len(build_graph(camera, "deepfogguard").fallible_order) == 8
    with pytest.raises(ConfigError):
        build_graph(health, "resnet")


def test_hash_ignores_seeds_and_output_dir_only():
    cfg = load_config("health_synthetic")
    h = config_hash(cfg)
    assert len(h) == 16 and int(h, 16) >= 0
    other = copy.deepcopy(cfg)
    other["seeds"] = [7]
    other["output_dir"] = "/elsewhere"
    assert config_hash(other) == h
    other["training"]["epochs"] = 3
    assert config_hash(other) != h


def test_every_problem_is_reported(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(
        "version: 2\n"
        "topology: {preset: health, skip_policy: all}\n"
        "dataset: {kind: mhealth}\n"
        "training: {epochs: 0}\n"
        "evaluation: {guess_mode: loud, mode: exact}\n"
        "seeds: []\n"
    )
    errors = validate_config(load_config(path))
    text = "\n".join(errors)
    for fragment in ("version", "skip_policy", "dataset.path", "training", "guess_mode", "seeds"):
        assert fragment in text
    assert len(errors) >= 6


def test_custom_tier_and_wrong_length(tmp_path):
    cfg = load_config("health_synthetic")
    cfg["reliability"]["tiers"] = ["flaky"]
    cfg["reliability"]["settings"] = {"flaky": [0.5, 0.5]}
    assert any("2 probabilities for 3" in e for e in validate_config(cfg))
    cfg["reliability"]["settings"] = {"flaky": [0.5, 0.5, 0.5]}
    assert validate_config(cfg) == []
    assert reliability_settings(cfg) == {"flaky": (0.5, 0.5, 0.5)}


def test_top_level_must_be_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_training_and_data_from_config():
    cfg = load_config("health_synthetic")
    cfg["dataset"]["n"] = 200
    ds = load_data(cfg)
    assert ds.n == 200 and ds.class_count == 12
    tc = training_config(cfg, seed=4)
    assert tc.epochs == 30 and tc.seed == 4 and tc.optimizer.batch_size == 1024
