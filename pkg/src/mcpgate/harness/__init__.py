"""Deterministic adversarial exercise rig for the gateway.

Scripted mock servers attack through the real enforcement pipeline
while a mechanical agent oracle stands in for the LLM: the Naive
oracle follows every embedded directive it can see, the Compliant
oracle follows none.  Attack success is a predicate over the run
transcript, so results are exact and reproducible.
"""

from .scenario import (
    Directive,
    ScenarioInvalid,
    ScenarioSpec,
    ServerSpec,
    extract_directives,
    load_scenario,
)
from .runner import (
    Deadlock,
    HarnessConfig,
    RunResult,
    SuiteReport,
    format_report,
    run_scenario,
    run_suite,
    scan_untagged_sampling,
)
from .stdio import run_scenario_stdio
from .builtin import builtin_suite

__all__ = [
    "Deadlock",
    "Directive",
    "HarnessConfig",
    "RunResult",
    "ScenarioInvalid",
    "ScenarioSpec",
    "ServerSpec",
    "SuiteReport",
    "builtin_suite",
    "extract_directives",
    "format_report",
    "load_scenario",
    "run_scenario",
    "run_scenario_stdio",
    "run_suite",
    "scan_untagged_sampling",
]
