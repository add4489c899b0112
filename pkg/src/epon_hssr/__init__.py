"""Discrete-event simulator of the E-PON upstream channel with HSSR and SS DBA."""

from .core import ConfigError, NetworkConfig, ScenarioConfig, Scheduler, ServiceClass, validate
from .engine import Simulation, run
from .metrics import MetricsSummary, write_csv

__all__ = [
    "ConfigError",
    "MetricsSummary",
    "NetworkConfig",
    "ScenarioConfig",
    "Scheduler",
    "ServiceClass",
    "Simulation",
    "run",
    "validate",
    "write_csv",
]
