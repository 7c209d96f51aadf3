import pytest

from src.config import (
    ALSConfig,
    FitConfig,
    load_config_file,
    parse_bool,
    parse_int_list,
    parse_ranks,
)
from src.errors import ConfigError


def test_defaults():
    config = FitConfig()
    assert config.max_iters == 200
    assert config.tol == 1e-5
    assert config.resolved_r_init((10, 10, 10)) == 10
    assert config.resolved_r_init((12, 4, 30)) == 4
    assert FitConfig(r_init=3).resolved_r_init((10, 10)) == 3


def test_file_and_overrides(tmp_path):
    path = tmp_path / "fit.cfg"
    path.write_text("# TR-VBI settings\nr_init = 6\npriors.a = 1e-3\n\nprune-rule = lambda\noverwrite_observed = no\n")
    raw = load_config_file(str(path))
    assert raw["priors.a"] == "1e-3"
    config = FitConfig.from_mapping(raw)
    assert config.r_init == 6
    assert config.priors_a == 1e-3
    assert config.prune_rule == "lambda"
    assert config.overwrite_observed is False
    override = FitConfig.from_mapping({"r_init": "4", "seed": 9}, base=config)
    assert (override.r_init, override.seed, override.priors_a) == (4, 9, 1e-3)


@pytest.mark.parametrize("raw", [{"learning_rate": "0.1"}, {"max_iters": "many"}, {"prune_rule": "magic"}])
def test_bad_values(raw):
    with pytest.raises(ConfigError):
        FitConfig.from_mapping(raw)


def test_invalid_fields():
    with pytest.raises(ConfigError):
        FitConfig(r_init=0)
    with pytest.raises(ConfigError):
        FitConfig(priors_c=0.0)
    with pytest.raises(ConfigError):
        ALSConfig(ridge=-1.0)


def test_malformed_file(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("r_init 3\n")
    with pytest.raises(ConfigError):
        load_config_file(str(path))
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / "missing.cfg"))


def test_als_ranks():
    config = ALSConfig.from_mapping({"ranks": "2,3,2", "ridge": "0"})
    assert config.ranks == (2, 3, 2)
    assert config.ridge == 0.0
    assert config.to_dict()["ranks"] == [2, 3, 2]


def test_parsers():
    assert parse_ranks("3") == 3
    assert parse_ranks("1, 2") == (1, 2)
    assert parse_int_list("4,4,3") == (4, 4, 3)
    assert parse_bool("Yes") is True
    with pytest.raises(ConfigError):
        parse_ranks("")
    with pytest.raises(ConfigError):
        parse_bool("maybe")


def test_lambda_rate_and_rounding():
    config = FitConfig()
    assert config.lambda_rate_factor == 0.5
    assert config.round_tol == 1e-6
    config = FitConfig.from_mapping({"lambda_rate_factor": "0.25", "round_tol": "0"})
    assert (config.lambda_rate_factor, config.round_tol) == (0.25, 0.0)
    with pytest.raises(ConfigError):
        FitConfig(lambda_rate_factor=0.0)
    with pytest.raises(ConfigError):
        FitConfig(round_tol=1.0)
