#!/usr/bin/env python
#
#   FASC Toolkit - Configuration
#
import copy
import logging
import os

from . import __version__


default_config = {
    "version": __version__,
    "rank_fraction": 0.5,
    "rho_threshold": 0.3,
    "seed": 0,
    "resamples": 1000,
    "exclude_layers": True,
    "exact_only": False,
    # Exact FASC up to this width, sketched above it.
    "exact_dim_limit": 512,
    "epsilon": 1e-8,
    "tau": 1e-6,
    "rho_gate": 0.3,
    "degenerate_gradient_norm": 1e-4,
    "threads": os.cpu_count() or 1,
    "log_level": "INFO",
}

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def value_to_bool(value):
    """ Helper function to deal with inconsistent string/bool values from the environment """
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        if value.strip().lower() in ("true", "1", "yes", "on"):
            return True
        if value.strip().lower() in ("false", "0", "no", "off", ""):
            return False
        raise ValueError(f"Cannot interpret {value!r} as a boolean")
    return bool(value)


def read_config(overrides=None, environ=None):
    """ Return a copy of the defaults with environment settings and explicit overrides applied """
    if environ is None:
        environ = os.environ

    _config = copy.deepcopy(default_config)

    if "FASC_THREADS" in environ:
        try:
            _threads = int(environ["FASC_THREADS"])
            if _threads < 1:
                raise ValueError(_threads)
            _config["threads"] = _threads
        except ValueError:
            logging.warning(f"Ignoring invalid FASC_THREADS value: {environ['FASC_THREADS']}")

    if "FASC_LOG_LEVEL" in environ:
        _level = environ["FASC_LOG_LEVEL"].strip().upper()
        if _level in LOG_LEVELS:
            _config["log_level"] = _level
        else:
            logging.warning(f"Ignoring unknown FASC_LOG_LEVEL: {environ['FASC_LOG_LEVEL']}")

    if overrides:
        for _setting, _value in overrides.items():
            if _setting not in _config:
                raise KeyError(f"Unknown setting: {_setting}")
            if _value is None:
                continue
            if isinstance(default_config[_setting], bool):
                _value = value_to_bool(_value)
            _config[_setting] = _value

    return _config


def setup_logging(config):
    logging.basicConfig(
        format="%(asctime)s %(levelname)s: %(message)s", level=getattr(logging, config["log_level"])
    )
