"""Worst-case operating scenarios and time series of operating conditions."""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ScenarioError
from .model import PHASE_SHIFT_DEG, Feeder, PhaseNodeId

PROBABILITY_TOL = 1e-9


@dataclass(frozen=True)
class Scenario:
    """One operating condition.  Powers are physical (kW / kVAr, per phase).

    ``feeder_head`` holds the measured substation phasor per phase (pu).
    Demand or MPP entries that are absent are zero.
    """
    id: str
    probability: float | None = None
    demand: dict[PhaseNodeId, tuple[float, float]] = field(default_factory=dict)
    mpp: dict[str, float] = field(default_factory=dict)
    feeder_head: dict[str, complex] = field(default_factory=dict)
    weights: tuple[float, float] | None = None
    no_load_loss: dict[tuple[str, str], float] = field(default_factory=dict)

    @property
    def total_load_kw(self) -> float:
        return sum(p for p, _ in self.demand.values())

    @property
    def total_mpp_kw(self) -> float:
        return sum(self.mpp.values())

    @property
    def penetration(self) -> float:
        """Instantaneous PV generation over gross load (1.0 means 100%)."""
        load = self.total_load_kw
        return self.total_mpp_kw / load if load > 0 else math.inf

    def head(self, feeder: Feeder) -> dict[str, complex]:
        """Substation phasor for every substation phase (defaults to 1 pu balanced)."""
        out = {}
        for p in feeder.bus_map[feeder.substation].phases:
            out[p] = self.feeder_head.get(p, cmath.rect(1.0, math.radians(PHASE_SHIFT_DEG[p])))
        return out

    def with_probability(self, probability: float) -> "Scenario":
        return Scenario(self.id, probability, self.demand, self.mpp, self.feeder_head,
                        self.weights, self.no_load_loss)

    # -- per-unit injections (indexed by the feeder network) ---------------

    def injections(self, feeder: Feeder, include_pv: bool = True) -> np.ndarray:
        """Net complex power injected at each node-phase (pu).

        Loads and transformer no-load losses are sinks; every PV unit is at
        its MPP with unity power factor when ``include_pv``.
        """
        net = feeder.network
        s = np.zeros(net.n, dtype=complex)
        pb = feeder.power_base_kw
        for node, (p, q) in self.demand.items():
            s[net.index[node]] -= complex(p, q) / pb
        for tr in feeder.transformers:
            for p, loss in zip(tr.phases, tr.no_load_loss):
                kw = self.no_load_loss.get((tr.id, p), loss if not feeder.per_unit else loss * pb)
                s[net.index[PhaseNodeId(tr.from_bus, p)]] -= kw / pb
        if include_pv:
            for g in feeder.pv_units:
                s[net.index[g.node]] += self.mpp.get(g.id, 0.0) / pb
        return s


def validate_scenarios(scenarios: list[Scenario], feeder: Feeder) -> list[Scenario]:
    """Check ids against the feeder and normalise probabilities.

    Probabilities may all be omitted (uniform) or all given, in which case
    they must sum to one within ``PROBABILITY_TOL``.
    """
    if not scenarios:
        raise ScenarioError("empty scenario set")
    ids = [s.id for s in scenarios]
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate scenario id", next(i for i in ids if ids.count(i) > 1))
    given = [s.probability is not None for s in scenarios]
    if not any(given):
        scenarios = [s.with_probability(1.0 / len(scenarios)) for s in scenarios]
    elif not all(given):
        missing = next(s.id for s in scenarios if s.probability is None)
        raise ScenarioError(f"scenario {missing} has no probability", missing)
    for s in scenarios:
        if not 0.0 <= s.probability <= 1.0:
            raise ScenarioError(f"scenario {s.id}: probability {s.probability} outside [0, 1]", s.id)
    total = math.fsum(s.probability for s in scenarios)
    if abs(total - 1.0) > PROBABILITY_TOL:
        raise ScenarioError(f"scenario probabilities sum={total:.12g}, expected 1", "probability")
    for s in scenarios:
        validate_condition(s, feeder)
    return scenarios


def validate_condition(s: Scenario, feeder: Feeder) -> None:
    loads = feeder.load_nodes
    for node in s.demand:
        if node not in loads:
            raise ScenarioError(f"scenario {s.id}: no load at {node}", str(node))
    pb = 1.0 if not feeder.per_unit else feeder.power_base_kw
    for gid, kw in s.mpp.items():
        g = feeder.pv_map.get(gid)
        if g is None:
            raise ScenarioError(f"scenario {s.id}: unknown PV {gid}", gid)
        if kw < 0 or kw > g.p_rated * pb * (1 + 1e-12):
            raise ScenarioError(f"scenario {s.id}: MPP of {gid} ({kw} kW) outside [0, p_rated]", gid)
    sub_phases = feeder.bus_map[feeder.substation].phases
    for p, v in s.feeder_head.items():
        if p not in sub_phases:
            raise ScenarioError(f"scenario {s.id}: substation has no phase {p}", p)
        if not 0.8 < abs(v) < 1.2:
            raise ScenarioError(f"scenario {s.id}: feeder-head magnitude {abs(v):.4f} pu "
                                f"outside (0.8, 1.2)", p)
    trs = {tr.id: tr for tr in feeder.transformers}
    for (tid, p), kw in s.no_load_loss.items():
        if tid not in trs or p not in trs[tid].phases:
            raise ScenarioError(f"scenario {s.id}: unknown transformer phase {tid}.{p}", tid)
        if kw < 0:
            raise ScenarioError(f"scenario {s.id}: negative no-load loss on {tid}", tid)
    if s.weights is not None and not all(w > 0 for w in s.weights):
        raise ScenarioError(f"scenario {s.id}: weights must be positive", s.id)


@dataclass(frozen=True)
class TimeSeriesInput:
    steps: tuple[Scenario, ...]
    step_minutes: float = 60.0

    def __post_init__(self):
        if not self.steps:
            raise ScenarioError("time series needs at least one step")
