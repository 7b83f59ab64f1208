"""Scenario loading, execution and reporting."""

from .metrics import MetricsReport, latency_stats, report
from .runner import ScenarioRun, run_scenario
from .scenario import Scenario, bundled_scenarios, dumps_scenario, load_scenario, loads_scenario

__all__ = [
    "MetricsReport",
    "Scenario",
    "ScenarioRun",
    "bundled_scenarios",
    "dumps_scenario",
    "latency_stats",
    "load_scenario",
    "loads_scenario",
    "report",
    "run_scenario",
]
