"""Experiment configuration, execution and the command line interface."""

from .config import ConfigError, ExperimentConfig, experiment_from_dict, load_yaml
from .experiment import CSV_HEADER, ResultRow, rows_to_csv, run_experiment, write_outputs
from .theory_suite import run_theory_suite

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "experiment_from_dict",
    "load_yaml",
    "CSV_HEADER",
    "ResultRow",
    "rows_to_csv",
    "run_experiment",
    "write_outputs",
    "run_theory_suite",
]
