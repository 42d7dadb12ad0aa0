from pathlib import Path

import pytest

from ghnforge.config import config_hash, load_config, parse_config
from ghnforge.errors import ConfigError, IoError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_are_resolved():
    cfg = load_config()
    assert cfg.seed == 0
    assert cfg.space.rng_seed == 0
    assert cfg.train.seed == 0
    assert cfg.eval.holdout.rng_seed is not None
    assert cfg.eval.holdout.rng_seed != cfg.space.rng_seed


def test_explicit_section_seed_is_kept(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = 4\n[train]\nseed = 11\n")
    cfg = load_config(path)
    assert cfg.train.seed == 11
    assert cfg.space.rng_seed == 4


def test_unknown_key_names_its_path(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[train]\nbogus = 1\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert info.value.path == "train.bogus"
    assert info.value.exit_code == 2


def test_invalid_value(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("ghn:\n  hidden: 10\n  heads: 4\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_yaml_and_toml_agree(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('name = "x"\nseed = 2\n[train]\nepochs = 3\n')
    yaml = tmp_path / "c.yaml"
    yaml.write_text("name: x\nseed: 2\ntrain:\n  epochs: 3\n")
    assert config_hash(load_config(toml)) == config_hash(load_config(yaml))


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("GHNFORGE_SEED", "7")
    cfg = load_config()
    assert cfg.seed == 7
    assert cfg.space.rng_seed == 7
    monkeypatch.setenv("GHNFORGE_SEED", "seven")
    with pytest.raises(ConfigError):
        load_config()


def test_ghn_preset_is_merged():
    cfg = parse_config({"ghn_preset": "S", "ghn": {"layers": 2}})
    assert (cfg.ghn.layers, cfg.ghn.hidden, cfg.ghn.heads) == (2, 128, 16)
    with pytest.raises(ConfigError):
        parse_config({"ghn_preset": "nope"})


def test_hash_is_stable_and_seed_sensitive():
    a = parse_config({"seed": 1})
    assert config_hash(a) == config_hash(parse_config({"seed": 1}))
    assert config_hash(a) != config_hash(parse_config({"seed": 2}))


def test_unsupported_format_and_missing_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{}")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(IoError):
        load_config(tmp_path / "missing.toml")


@pytest.mark.parametrize("name", ["smoke.toml", "desk_t.toml", "desk_t_noreg.yaml"])
def test_shipped_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.name
