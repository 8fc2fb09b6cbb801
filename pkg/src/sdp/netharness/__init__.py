"""Simulated network, scenario runner, race suite and CLI."""

from .race import RaceScenario, race_suite, run_race_scenario
from .sim import (
    CSV_COLUMNS,
    LinkModel,
    MetricsRow,
    ScenarioConfig,
    ScenarioResult,
    config_from_dict,
    count_packets,
    run_scenario,
    write_csv,
)
from .trace import Trace, TraceEvent, dump, find_plaintext

__all__ = [
    "CSV_COLUMNS", "LinkModel", "MetricsRow", "RaceScenario", "ScenarioConfig", "ScenarioResult",
    "Trace", "TraceEvent", "config_from_dict", "count_packets", "dump", "find_plaintext",
    "race_suite", "run_race_scenario", "run_scenario", "write_csv",
]
