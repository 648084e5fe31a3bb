import pytest

from fasc.config import default_config, read_config, value_to_bool


def test_defaults_are_copied():
    _config = read_config(environ={})
    _config["rank_fraction"] = 0.9

    assert default_config["rank_fraction"] == 0.5
    assert read_config(environ={})["rho_threshold"] == 0.3


def test_overrides():
    _config = read_config({"rho_threshold": 0.5, "seed": None, "exact_only": "yes"}, environ={})

    assert _config["rho_threshold"] == 0.5
    assert _config["seed"] == 0
    assert _config["exact_only"] is True


def test_unknown_override():
    with pytest.raises(KeyError):
        read_config({"rank": 3}, environ={})


def test_environment():
    _config = read_config(environ={"FASC_THREADS": "3", "FASC_LOG_LEVEL": "debug"})
    assert _config["threads"] == 3
    assert _config["log_level"] == "DEBUG"


def test_bad_environment_ignored():
    _config = read_config(environ={"FASC_THREADS": "-2", "FASC_LOG_LEVEL": "chatty"})
    assert _config["threads"] == default_config["threads"]
    assert _config["log_level"] == "INFO"


def test_value_to_bool():
    assert value_to_bool("True") is True
    assert value_to_bool("off") is False
    assert value_to_bool(0) is False
    with pytest.raises(ValueError):
        value_to_bool("maybe")
