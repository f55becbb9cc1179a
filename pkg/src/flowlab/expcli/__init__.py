"""Experiment runners and the ``flowlab`` command line."""

from .config import ConfigError, ExperimentConfig, build_config
from .runners import (run_attack_eval, run_entropy_sweep, run_interpolation, run_verify,
                      run_wrongclass_histogram)

__all__ = ["ConfigError", "ExperimentConfig", "build_config", "run_attack_eval",
           "run_entropy_sweep", "run_interpolation", "run_verify", "run_wrongclass_histogram"]
