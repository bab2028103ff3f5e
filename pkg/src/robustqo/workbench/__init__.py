"""Scenario-driven workbench: synthetic workloads, pipelines, reports and the CLI."""

from .pipeline import InvariantViolation, run_pipeline, stage_seeds
from .report import RunReport
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario

__all__ = [
    "InvariantViolation",
    "RunReport",
    "Scenario",
    "ScenarioError",
    "load_scenario",
    "parse_scenario",
    "run_pipeline",
    "stage_seeds",
]
