"""Robust static routing and speed scaling for processor-sharing server farms."""

from .optimizer import SolveOptions, SolveResult, Status, check_policy, feasibility_minmax, solve_m2
from .primitives import (
    ApplicationSpec,
    ConfigError,
    DistributionSpec,
    ServerSpec,
    StaticPolicy,
    SystemSpec,
    load_system,
    benchmark_farm,
    read_policy,
    read_system,
)
from .simulator import SimReport, simulate

__all__ = [
    "ApplicationSpec", "ConfigError", "DistributionSpec", "ServerSpec", "StaticPolicy", "SystemSpec",
    "SimReport", "SolveOptions", "SolveResult", "Status", "check_policy", "feasibility_minmax",
    "load_system", "benchmark_farm", "read_policy", "read_system", "simulate", "solve_m2",
]
