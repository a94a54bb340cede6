"""Discrete-event simulator for multi-hop firmware roll-outs: a synchronous
flooding stack against a CSMA-CA/RPL baseline on a lamppost chain."""

from .engine import Engine
from .scenario import KpiRecord, Scenario, ScenarioError, Stack, run_scenario, run_sweep

__all__ = ["Engine", "KpiRecord", "Scenario", "ScenarioError", "Stack", "run_scenario", "run_sweep"]
__version__ = "0.1.0"
