import pytest

from modules.config import BackendConfig, apply_seed_overrides, config_from_dict, load_config
from modules.errors import ConfigError


def test_defaults():
    cfg = config_from_dict({})
    assert cfg.prompting.version == "v3-single-line"
    assert cfg.backends[0].kind == "mock-rules"
    assert cfg.seeds.sampling == 20240101
    assert cfg.runs == 1


def test_paths_resolve_against_config_file(tmp_path):
    path = tmp_path / "sub" / "run.yaml"
    path.parent.mkdir()
    path.write_text("gold: gold.csv\noutput:\n  dir: out\n")
    cfg = load_config(path)
    assert cfg.gold == (tmp_path / "sub" / "gold.csv").resolve()
    assert cfg.output.dir == (tmp_path / "sub" / "out").resolve()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="invalid configuration"):
        config_from_dict({"prompting": {"shot": [1]}})


def test_remote_backend_needs_model():
    with pytest.raises(ConfigError):
        config_from_dict({"backends": [{"kind": "remote-chat", "endpoint": "https://x"}]})


def test_duplicate_backend_labels():
    with pytest.raises(ConfigError, match="unique"):
        config_from_dict({"backends": [{"kind": "mock-rules"}, {"kind": "mock-rules"}]})


def test_repeat_runs_follow_temperature():
    hot = {"kind": "remote-chat", "endpoint": "https://x", "model": "m", "temperature": 0.7}
    assert config_from_dict({"backends": [hot]}).runs == 3
    assert config_from_dict({"backends": [hot], "classify": {"runs": 5}}).runs == 5
    assert BackendConfig(kind="remote-chat", endpoint="https://x", model="m").deterministic


def test_seed_overrides():
    cfg = apply_seed_overrides(config_from_dict({}), ["bootstrap=9", "exemplar=3"])
    assert (cfg.seeds.bootstrap, cfg.seeds.exemplar, cfg.seeds.sampling) == (9, 3, 20240101)
    with pytest.raises(ConfigError):
        apply_seed_overrides(cfg, ["colour=1"])
    with pytest.raises(ConfigError):
        apply_seed_overrides(cfg, ["bootstrap=abc"])


def test_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/run.yaml")


def test_manifest_dict_materializes_runs():
    assert config_from_dict({}).manifest_dict()["classify"]["runs"] == 1


def test_shipped_example_config_loads(data_dir):
    cfg = load_config(data_dir.parent / "config.example.yaml")
    assert [b.name for b in cfg.backends] == ["gpt-4o", "mock"]
    assert cfg.prompting.selections == {1: [2], 2: [2, 1]}
