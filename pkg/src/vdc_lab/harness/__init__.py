"""Experiment runner: config handling, the five commands and their metrics."""

from .commands import cmd_dump_conditions, cmd_edit, cmd_optimize, cmd_sweep, cmd_train_toy
from .config import ConfigError, RunConfig
from .metrics import MetricsReport

__all__ = ["ConfigError", "MetricsReport", "RunConfig", "cmd_dump_conditions", "cmd_edit", "cmd_optimize", "cmd_sweep", "cmd_train_toy"]
