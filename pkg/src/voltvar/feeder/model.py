"""Immutable description of an unbalanced distribution feeder.

Quantities are either physical (ohm, siemens, kW, kVAr) or per-unit,
as recorded by :attr:`Feeder.per_unit`.  The voltage base is the
line-to-line kV and the power base the three-phase kVA, so the per-phase
power base is ``s_base_kva / 3`` and ``Z_base = kV**2 * 1000 / kVA``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from ..errors import InvalidCurve, UnitError, ValidationError
from ..qvcurve import QVCurve, q_max_from_pf, s_rating, validate_breakpoints

PHASES = ("A", "B", "C")
PHASE_SHIFT_DEG = {"A": 0.0, "B": -120.0, "C": 120.0}

Matrix = tuple[tuple[float, ...], ...]


@dataclass(frozen=True, order=True)
class PhaseNodeId:
    bus: str
    phase: str

    def __str__(self):
        return f"{self.bus}.{self.phase}"


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]
    x: float | None = None
    y: float | None = None


def _as_matrix(m) -> Matrix:
    return tuple(tuple(float(v) for v in row) for row in m)


@dataclass(frozen=True)
class LineSegment:
    id: str
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    r: Matrix
    x: Matrix
    b: Matrix  # total shunt susceptance; half is applied at each terminal

    def __post_init__(self):
        for name in ("r", "x", "b"):
            object.__setattr__(self, name, _as_matrix(getattr(self, name)))

    @property
    def z(self) -> np.ndarray:
        return np.array(self.r) + 1j * np.array(self.x)


@dataclass(frozen=True)
class Transformer:
    """Series-impedance branch plus a constant no-load real-power sink.

    ``r``, ``x`` and ``no_load_loss`` are per phase; the loss is drawn at the
    primary (``from_bus``) node-phases.
    """
    id: str
    from_bus: str
    to_bus: str
    phases: tuple[str, ...]
    r: tuple[float, ...]
    x: tuple[float, ...]
    no_load_loss: tuple[float, ...]

    @property
    def nodes(self) -> list[PhaseNodeId]:
        return [PhaseNodeId(self.from_bus, p) for p in self.phases]


@dataclass(frozen=True)
class Load:
    id: str
    bus: str
    phase: str
    p: float  # nominal, informational; scenarios carry the demand
    q: float

    @property
    def node(self) -> PhaseNodeId:
        return PhaseNodeId(self.bus, self.phase)


@dataclass(frozen=True)
class PVUnit:
    id: str
    bus: str
    phase: str
    p_rated: float
    candidate: bool = False
    pf_min: float = 0.8
    qv: tuple[float, ...] | None = None

    @property
    def node(self) -> PhaseNodeId:
        return PhaseNodeId(self.bus, self.phase)

    @property
    def q_max(self) -> float:
        return q_max_from_pf(self.pf_min, self.p_rated)

    @property
    def s_rating(self) -> float:
        return s_rating(self.q_max, self.p_rated)

    @property
    def curve(self) -> QVCurve | None:
        if self.qv is None:
            return None
        return QVCurve(self.qv, self.q_max)


@dataclass(frozen=True)
class Feeder:
    buses: tuple[Bus, ...]
    lines: tuple[LineSegment, ...]
    transformers: tuple[Transformer, ...]
    loads: tuple[Load, ...]
    pv_units: tuple[PVUnit, ...]
    substation: str
    v_base_kv: float
    s_base_kva: float
    v_min: float = 0.95
    v_max: float = 1.05
    per_unit: bool = False
    name: str = "feeder"

    def __post_init__(self):
        for f in ("buses", "lines", "transformers", "loads", "pv_units"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        validate(self)

    # -- lookups ----------------------------------------------------------

    @cached_property
    def bus_map(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def pv_map(self) -> dict[str, PVUnit]:
        return {g.id: g for g in self.pv_units}

    @cached_property
    def nodes(self) -> list[PhaseNodeId]:
        """Every node-phase, in bus-declaration order then phase order."""
        return [PhaseNodeId(b.id, p) for b in self.buses for p in PHASES if p in b.phases]

    @cached_property
    def load_nodes(self) -> set[PhaseNodeId]:
        return {ld.node for ld in self.loads}

    @property
    def candidates(self) -> list[PVUnit]:
        return [g for g in self.pv_units if g.candidate]

    @property
    def power_base_kw(self) -> float:
        """Per-phase power base (kW per pu)."""
        return self.s_base_kva / 3.0

    @property
    def z_base(self) -> float:
        return self.v_base_kv ** 2 * 1000.0 / self.s_base_kva

    def kw_to_pu(self, value):
        return value / self.power_base_kw

    def counts(self) -> dict[str, int]:
        """Per-phase element counts, in the shape of the fixture manifests."""
        out: dict[str, int] = {
            "buses": len(self.buses),
            "node_phases": len(self.nodes),
            "lines": len(self.lines),
            "line_phases": sum(len(ln.phases) for ln in self.lines),
            "transformers": len(self.transformers),
            "loads": len(self.loads),
            "pv": len(self.pv_units),
            "candidates": len(self.candidates),
        }
        for p in PHASES:
            out[f"nodes_{p}"] = sum(1 for n in self.nodes if n.phase == p)
            out[f"loads_{p}"] = sum(1 for ld in self.loads if ld.phase == p)
            out[f"pv_{p}"] = sum(1 for g in self.pv_units if g.phase == p)
        return out

    @cached_property
    def pu(self) -> "Feeder":
        """The same feeder on its per-unit bases (cached)."""
        return to_per_unit(self)

    @cached_property
    def network(self):
        from .network import Network
        if not self.per_unit:
            return self.pu.network
        return Network(self)


# -- validation -------------------------------------------------------------

def _check_matrix(name: str, m: Matrix, n: int, ref: str, symmetric=True):
    if len(m) != n or any(len(row) != n for row in m):
        raise ValidationError(f"{ref}: {name} must be {n}x{n}", ref)
    a = np.array(m, dtype=float)
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{ref}: {name} has non-finite entries", ref)
    if symmetric and not np.allclose(a, a.T, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValidationError(f"{ref}: {name} is not symmetric", ref)


def _check_phases(phases, ref):
    if not phases or len(set(phases)) != len(phases) or any(p not in PHASES for p in phases):
        raise ValidationError(f"{ref}: invalid phase set {phases!r}", ref)


def validate(feeder: Feeder) -> None:
    if not (feeder.v_base_kv > 0 and math.isfinite(feeder.v_base_kv)):
        raise UnitError(f"voltage base must be positive, got {feeder.v_base_kv}")
    if not (feeder.s_base_kva > 0 and math.isfinite(feeder.s_base_kva)):
        raise UnitError(f"power base must be positive, got {feeder.s_base_kva}")
    if not 0 < feeder.v_min < feeder.v_max:
        raise ValidationError(f"voltage limits must satisfy 0 < v_min < v_max, "
                              f"got ({feeder.v_min}, {feeder.v_max})")

    buses: dict[str, Bus] = {}
    for b in feeder.buses:
        if b.id in buses:
            raise ValidationError(f"duplicate bus {b.id}", b.id)
        _check_phases(b.phases, b.id)
        buses[b.id] = b

    def need_bus(bus_id, ref):
        if bus_id not in buses:
            raise ValidationError(f"{ref} references unknown bus {bus_id}", bus_id)
        return buses[bus_id]

    def need_phases(bus_id, phases, ref):
        bus = need_bus(bus_id, ref)
        missing = [p for p in phases if p not in bus.phases]
        if missing:
            raise ValidationError(f"{ref}: bus {bus_id} lacks phase(s) {''.join(missing)}", ref)

    need_bus(feeder.substation, "substation")

    ids: set[str] = set()
    pairs: set[frozenset] = set()
    for br in (*feeder.lines, *feeder.transformers):
        if br.id in ids:
            raise ValidationError(f"duplicate branch id {br.id}", br.id)
        ids.add(br.id)
        need_bus(br.from_bus, br.id)
        need_bus(br.to_bus, br.id)
        if br.from_bus == br.to_bus:
            raise ValidationError(f"{br.id}: from_bus equals to_bus", br.id)
        _check_phases(br.phases, br.id)
        need_phases(br.from_bus, br.phases, br.id)
        need_phases(br.to_bus, br.phases, br.id)
        key = frozenset((br.from_bus, br.to_bus))
        if key in pairs:
            raise ValidationError(f"{br.id}: parallel duplicate segment between "
                                  f"{br.from_bus} and {br.to_bus}", br.id)
        pairs.add(key)

    for ln in feeder.lines:
        n = len(ln.phases)
        _check_matrix("R", ln.r, n, ln.id)
        _check_matrix("X", ln.x, n, ln.id)
        _check_matrix("B", ln.b, n, ln.id)
        if any(ln.r[i][i] <= 0 for i in range(n)):
            raise ValidationError(f"{ln.id}: self resistance must be positive", ln.id)

    for tr in feeder.transformers:
        n = len(tr.phases)
        for name in ("r", "x", "no_load_loss"):
            vals = getattr(tr, name)
            if len(vals) != n or not all(math.isfinite(v) for v in vals):
                raise ValidationError(f"{tr.id}: {name} needs {n} finite values", tr.id)
        if any(v <= 0 for v in tr.r):
            raise ValidationError(f"{tr.id}: series resistance must be positive", tr.id)
        if any(v < 0 for v in tr.no_load_loss):
            raise ValidationError(f"{tr.id}: no-load loss must be non-negative", tr.id)

    seen: set[str] = set()
    for ld in feeder.loads:
        if ld.id in seen:
            raise ValidationError(f"duplicate load id {ld.id}", ld.id)
        seen.add(ld.id)
        need_phases(ld.bus, (ld.phase,), ld.id)

    seen = set()
    for g in feeder.pv_units:
        if g.id in seen:
            raise ValidationError(f"duplicate PV id {g.id}", g.id)
        seen.add(g.id)
        need_phases(g.bus, (g.phase,), g.id)
        if not g.p_rated > 0:
            raise ValidationError(f"{g.id}: p_rated must be positive", g.id)
        if not 0 < g.pf_min < 1:
            raise ValidationError(f"{g.id}: pf_min must lie in (0, 1)", g.id)
        if g.candidate and g.qv is None:
            raise ValidationError(f"{g.id}: candidate without a Q-V curve", g.id)
        if g.qv is not None:
            try:
                validate_breakpoints(g.qv)
            except InvalidCurve as exc:
                raise ValidationError(f"{g.id}: {exc}", g.id) from None

    _check_connected(feeder, buses)


def _check_connected(feeder: Feeder, buses: dict[str, Bus]) -> None:
    # node-phase level BFS: every node-phase must reach the substation through
    # branches carrying that phase, otherwise the network equations are singular
    adj: dict[PhaseNodeId, list[PhaseNodeId]] = {}
    for br in (*feeder.lines, *feeder.transformers):
        for p in br.phases:
            a, b = PhaseNodeId(br.from_bus, p), PhaseNodeId(br.to_bus, p)
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
    start = [PhaseNodeId(feeder.substation, p) for p in buses[feeder.substation].phases]
    seen = set(start)
    queue = deque(start)
    while queue:
        n = queue.popleft()
        for m in adj.get(n, ()):
            if m not in seen:
                seen.add(m)
                queue.append(m)
    for b in feeder.buses:
        for p in b.phases:
            if PhaseNodeId(b.id, p) not in seen:
                raise ValidationError(f"bus {b.id} phase {p} is not connected to the substation", b.id)


# -- per-unit conversion ----------------------------------------------------

def to_per_unit(feeder: Feeder) -> Feeder:
    """Return the feeder with impedances and powers on its own bases.

    Already-converted feeders are returned unchanged.
    """
    if feeder.per_unit:
        return feeder
    if not feeder.v_base_kv > 0 or not feeder.s_base_kva > 0:
        raise UnitError("bases must be positive")
    zb = feeder.z_base
    sb = feeder.power_base_kw

    def zs(m):
        return tuple(tuple(v / zb for v in row) for row in m)

    def ys(m):
        return tuple(tuple(v * zb for v in row) for row in m)

    lines = tuple(replace(ln, r=zs(ln.r), x=zs(ln.x), b=ys(ln.b)) for ln in feeder.lines)
    trs = tuple(replace(tr, r=tuple(v / zb for v in tr.r), x=tuple(v / zb for v in tr.x),
                        no_load_loss=tuple(v / sb for v in tr.no_load_loss))
                for tr in feeder.transformers)
    loads = tuple(replace(ld, p=ld.p / sb, q=ld.q / sb) for ld in feeder.loads)
    pvs = tuple(replace(g, p_rated=g.p_rated / sb) for g in feeder.pv_units)
    return replace(feeder, lines=lines, transformers=trs, loads=loads, pv_units=pvs,
                   per_unit=True)
