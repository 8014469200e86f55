"""Deterministic simulator for asynchronous federated learning aggregation rules."""

from aflsim.aggregators import AggregatorSpec, LocalTrainSpec
from aflsim.core import ConfigError, RunConfig, StepSizeRule
from aflsim.delaysim import DelayModel, RunTrace, run_simulation
from aflsim.probe import ProbeSpec

__version__ = "0.1.0"

__all__ = [
    "AggregatorSpec",
    "ConfigError",
    "DelayModel",
    "LocalTrainSpec",
    "ProbeSpec",
    "RunConfig",
    "RunTrace",
    "StepSizeRule",
    "run_simulation",
]
