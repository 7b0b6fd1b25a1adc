"""Configuration, orchestration, self-checks and the command line."""

from .config import ConfigError, ExperimentConfig, far_target, schema
from .runner import RunRecord, emit_outputs, run_experiment
from .verify import verify

__all__ = ["ConfigError", "ExperimentConfig", "RunRecord", "emit_outputs", "far_target", "run_experiment",
           "schema", "verify"]
