"""Feeder model: network description, scenarios and their text format."""

from .io import (dump_conditions, dump_feeder, dump_timeseries, load_feeder, load_scenarios,
                 load_timeseries, parse_feeder, parse_scenarios, save_feeder)
from .model import (PHASES, Bus, Feeder, LineSegment, Load, PhaseNodeId, PVUnit, Transformer,
                    to_per_unit)
from .network import Network
from .scenario import Scenario, TimeSeriesInput, validate_scenarios

__all__ = [
    "PHASES", "Bus", "Feeder", "LineSegment", "Load", "PhaseNodeId", "PVUnit", "Transformer",
    "Network", "Scenario", "TimeSeriesInput", "to_per_unit", "validate_scenarios",
    "load_feeder", "parse_feeder", "dump_feeder", "save_feeder", "load_scenarios",
    "parse_scenarios", "dump_conditions", "load_timeseries", "dump_timeseries",
]
