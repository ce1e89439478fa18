"""Runnable surface: configuration, synthetic data, the two-stage driver, metrics and the CLI."""

from .config import RunConfig, dump_config, load_config
from .pipeline import Workspace, run_conflict_experiment, run_stage1, run_stage2

__all__ = ["RunConfig", "Workspace", "dump_config", "load_config", "run_conflict_experiment",
           "run_stage1", "run_stage2"]
