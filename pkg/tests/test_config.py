import pytest

from flowreg.config import RunConfig, apply_overrides, config_from_dict, load_config, parse_override
from flowreg.errors import ConfigError


def test_defaults_roundtrip():
    cfg = RunConfig()
    assert config_from_dict(cfg.to_dict()) == cfg


def test_yaml_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("sampler: {steps: 4}\ntrain: {lr_halving: [0.5]}\n")
    cfg = load_config(p, ["--sampler.generations=3", "--paths.checkpoint=m.pfrg", "--seed=9"])
    assert cfg.sampler.steps == 4 and cfg.sampler.generations == 3
    assert cfg.train.lr_halving == (0.5,)
    assert cfg.paths.checkpoint == "m.pfrg" and cfg.seed == 9


def test_override_parsing():
    assert parse_override("--a.b=1.5") == (["a", "b"], 1.5)
    assert parse_override("--a.b=false") == (["a", "b"], False)
    for bad in ("a.b=1", "--a.b", "--a..b=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


@pytest.mark.parametrize("flag", ["--sampler.nope=1", "--nosection.key=1", "--sampler.steps.deep=1"])
def test_unknown_override_rejected(flag):
    with pytest.raises(ConfigError):
        apply_overrides({}, [flag])


def test_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"sampler": {"stepz": 3}})
    with pytest.raises(ConfigError):
        config_from_dict({"extra": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"sampling": {"alpha_s": 2.0}})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("sampler: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
