"""Experiment orchestration and the batch command line."""

from .commands import RunManifest, cmd_evaluate, cmd_fit, cmd_grid, cmd_predict, cmd_report, cmd_run, cmd_simulate
from .config import ExperimentConfig, load_config
from .methods import BASELINES, DRUM_METHODS, METHODS, canonical, fit_methods
from .schema import ColumnSchema, Standardizer

__all__ = [
    "BASELINES", "DRUM_METHODS", "METHODS", "ColumnSchema", "ExperimentConfig", "RunManifest", "Standardizer",
    "canonical", "cmd_evaluate", "cmd_fit", "cmd_grid", "cmd_predict", "cmd_report", "cmd_run", "cmd_simulate",
    "fit_methods", "load_config",
]
