"""Validation engines for autonomous Volt-VAr control.

``volt_var_fixed_point`` iterates the droop rule against the nonlinear
power flow until the inverters' reactive output is self-consistent.
``run_quasi_static`` repeats that for every step of a time series and
``run_dynamic_enable`` replaces the controller by a first-order lag and
steps it in time, solving the network algebraically at each sample.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import Divergence, NonConvergence, OscillationDetected, VoltVarError
from .feeder import Feeder, PhaseNodeId, Scenario, TimeSeriesInput
from .powerflow import PowerFlowSolution, solve_nonlinear
from .qvcurve import QVCurve

Q_TOL = 1e-6
MAX_FIXED_POINT_ITER = 200
OSCILLATION_WINDOW = 20
SETTLE_BAND = 0.002
V_DIVERGE = (0.5, 1.5)


def worker_count(jobs: int) -> int:
    """Thread budget, capped by ``VOLTVAR_THREADS`` when set."""
    env = os.environ.get("VOLTVAR_THREADS")
    cap = int(env) if env and env.isdigit() and int(env) > 0 else min(8, os.cpu_count() or 1)
    return max(1, min(cap, jobs))


def parallel_map(fn, items):
    items = list(items)
    n = worker_count(len(items))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class InverterDynamics:
    tau: float = 0.02
    dt: float = 0.001
    t_on: float = 0.04
    alpha: float = 0.5
    t_end: float = 0.6

    def __post_init__(self):
        if not 0 < self.dt < self.tau:
            raise ValueError(f"need 0 < dt < tau, got dt={self.dt}, tau={self.tau}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not 0 <= self.t_on < self.t_end:
            raise ValueError("t_on must lie in [0, t_end)")


@dataclass
class InverterState:
    id: str
    node: PhaseNodeId
    index: int
    mpp: float
    s_rating: float
    curve: QVCurve

    def p_available(self, q):
        """VAr priority: active power is what the rating leaves after ``q``."""
        return np.minimum(self.mpp, np.sqrt(np.maximum(0.0, self.s_rating ** 2 - np.square(q))))


@dataclass
class FixedPointResult:
    solution: PowerFlowSolution
    setpoints: dict[str, tuple[float, float]]
    iterations: int

    @property
    def q(self) -> dict[str, float]:
        return {k: q for k, (_, q) in self.setpoints.items()}

    @property
    def p(self) -> dict[str, float]:
        return {k: p for k, (p, _) in self.setpoints.items()}


def _active_ids(plan) -> list[str]:
    if plan is None:
        return []
    if hasattr(plan, "placed_ids"):
        return list(plan.placed_ids)
    return list(plan)


def inverter_states(feeder: Feeder, scenario: Scenario, active, curves=None) -> list[InverterState]:
    """Inverters that take part in control: listed, carrying a curve, and producing."""
    pu = feeder.pu
    net = feeder.network
    out = []
    for gid in sorted(set(_active_ids(active)), key=lambda g: [u.id for u in pu.pv_units].index(g)):
        g = pu.pv_map[gid]
        curve = (curves or {}).get(gid, g.curve)
        if curve is None:
            raise VoltVarError(f"PV {gid} has no Q-V curve")
        mpp = scenario.mpp.get(gid, 0.0) / feeder.power_base_kw
        if mpp <= 0.0:
            continue  # no irradiance, inverter idle
        out.append(InverterState(gid, g.node, net.index[g.node], mpp, g.s_rating, curve))
    return out


def _oscillating(history: list[np.ndarray]) -> np.ndarray:
    """Inverters whose recent updates keep flipping sign without dying out.

    Over the last ``OSCILLATION_WINDOW`` updates at least half of the
    transitions must change sign and the largest update of the later half
    must be at least 90% of the earlier half's.
    """
    w = OSCILLATION_WINDOW
    if len(history) < w:
        return np.zeros(0, dtype=int)
    h = np.array(history[-w:])
    flips = np.sum(h[1:] * h[:-1] < 0, axis=0)
    early = np.max(np.abs(h[: w // 2]), axis=0)
    late = np.max(np.abs(h[w // 2:]), axis=0)
    return np.flatnonzero((flips >= w // 2) & (late >= 0.9 * early) & (late > Q_TOL))


def volt_var_fixed_point(feeder: Feeder, scenario: Scenario, active=None, alpha: float = 0.5,
                         tol: float = Q_TOL, max_iter: int = MAX_FIXED_POINT_ITER,
                         curves: dict[str, QVCurve] | None = None) -> FixedPointResult:
    """Damped droop iteration ``Q <- (1-a) Q + a q(|V|)`` to self-consistency.

    Powers are pu.  Raises :class:`OscillationDetected` when the updates of
    some inverter keep alternating in sign without shrinking, and
    :class:`NonConvergence` if the iteration cap is reached otherwise.
    """
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    invs = inverter_states(feeder, scenario, active, curves)
    q = np.zeros(len(invs))
    history: list[np.ndarray] = []
    qs: list[np.ndarray] = []
    v = None
    for it in range(1, max_iter + 1):
        p = np.array([g.p_available(qk) for g, qk in zip(invs, q)])
        setpoints = {g.id: (float(pk), float(qk)) for g, pk, qk in zip(invs, p, q)}
        sol = solve_nonlinear(feeder, scenario, setpoints, v0=v)
        v = sol.v
        target = np.array([g.curve.q(abs(v[g.index])) for g in invs])
        dq = alpha * (target - q)
        if dq.size == 0 or np.max(np.abs(dq)) <= tol:
            return FixedPointResult(sol, setpoints, it)
        history.append(dq)
        qs.append(q.copy())
        bad = _oscillating(history)
        if bad.size:
            _raise_oscillation(invs, bad, qs)
        q = q + dq
    dq_max = float(np.max(np.abs(history[-1])))
    raise NonConvergence(max_iter, dq_max, f"Volt-VAr iteration did not settle in {max_iter} "
                                           f"iterations (last |dQ| {dq_max:.3e} pu)")


def _raise_oscillation(invs, bad, qs):
    window = np.array(qs[-OSCILLATION_WINDOW:])
    env = {invs[k].id: (float(window[:, k].min()), float(window[:, k].max())) for k in bad}
    raise OscillationDetected([invs[k].id for k in bad], env)


# -- quasi-static time series ---------------------------------------------

@dataclass
class QuasiStaticResult:
    steps: list[str]
    results: list[FixedPointResult]
    violations: list[tuple[int, str, str, float, str]]
    control: bool
    node_index: dict[str, int] = field(default_factory=dict)
    mpp: dict[str, list[float]] = field(default_factory=dict)

    def series(self, gid: str) -> dict[str, list[float]]:
        """Per-step ``P``, ``Q`` (pu) and local ``|V|`` of one PV unit (idle units sit at MPP)."""
        out = {"P": [], "Q": [], "V": []}
        k = self.node_index[gid]
        for step, r in enumerate(self.results):
            p, q = r.setpoints.get(gid, (self.mpp[gid][step], 0.0))
            out["P"].append(p)
            out["Q"].append(q)
            out["V"].append(float(abs(r.solution.v[k])))
        return out


def violation_rows(feeder: Feeder, sol: PowerFlowSolution, step: int):
    rows = []
    for n, vm in zip(sol.nodes, sol.vm):
        if vm > feeder.v_max + 1e-12:
            rows.append((step, n.bus, n.phase, float(vm), "max"))
        elif vm < feeder.v_min - 1e-12:
            rows.append((step, n.bus, n.phase, float(vm), "min"))
    return rows


def run_quasi_static(feeder: Feeder, plan, series: TimeSeriesInput, control: bool = True,
                     alpha: float = 0.5) -> QuasiStaticResult:
    """Fixed point at every step with the planned inverters (none when ``control`` is off)."""
    active = _active_ids(plan) if control else []

    def one(k):
        try:
            return volt_var_fixed_point(feeder, series.steps[k], active, alpha)
        except VoltVarError as exc:
            exc.args = (f"step {k} ({series.steps[k].id}): {exc.args[0] if exc.args else exc}",)
            raise

    results = parallel_map(one, range(len(series.steps)))
    viol = []
    for k, r in enumerate(results):
        viol += violation_rows(feeder, r.solution, k)
    net = feeder.network
    pb = feeder.power_base_kw
    index = {g.id: net.index[g.node] for g in feeder.pv_units}
    mpp = {g.id: [s.mpp.get(g.id, 0.0) / pb for s in series.steps] for g in feeder.pv_units}
    return QuasiStaticResult([s.id for s in series.steps], results, viol, control, index, mpp)


def write_violation_log(rows, path) -> None:
    lines = ["step,node,phase,Vmag,bound"]
    lines += [f"{s},{b},{p},{v:.6f},{side}" for s, b, p, v, side in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# -- dynamic enable -------------------------------------------------------

@dataclass
class DynamicTrace:
    t: np.ndarray
    nodes: list[PhaseNodeId]
    vm: np.ndarray  # (samples, monitored nodes)
    inverters: list[str]
    p: np.ndarray  # (samples, inverters)
    q: np.ndarray
    settled: bool = False
    settling_time: float = math.nan
    meta: dict = field(default_factory=dict)

    def write(self, out_dir, prefix: str = "") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        vpath, ppath = out / f"{prefix}trace_v.csv", out / f"{prefix}trace_pq.csv"
        rows = ["t,node,Vmag"]
        for k, t in enumerate(self.t):
            rows += [f"{t:.4f},{n},{self.vm[k, j]:.8f}" for j, n in enumerate(self.nodes)]
        vpath.write_text("\n".join(rows) + "\n")
        rows = ["t,inverter,P,Q"]
        for k, t in enumerate(self.t):
            rows += [f"{t:.4f},{g},{self.p[k, j]:.8f},{self.q[k, j]:.8f}" for j, g in enumerate(self.inverters)]
        ppath.write_text("\n".join(rows) + "\n")
        return vpath, ppath


def _settling(t, vm, t_on, tau):
    """First time after ``t_on`` from which every trace stays in band of its final value."""
    final = vm[-1]
    inside = np.all(np.abs(vm - final) <= 0.5 * SETTLE_BAND * np.abs(final), axis=1)
    outside = np.flatnonzero(~inside)
    start = outside[-1] + 1 if outside.size else 0
    start = max(start, int(np.searchsorted(t, t_on)))
    if start >= len(t):
        return False, math.nan
    settled = t[-1] - t[start] >= 5 * tau - 1e-12
    return bool(settled), float(t[start] - t_on)


def run_dynamic_enable(feeder: Feeder, plan, scenario: Scenario, dyn: InverterDynamics | None = None,
                       monitored=None, curves: dict[str, QVCurve] | None = None) -> DynamicTrace:
    """Step the lagged Volt-VAr loop in time after enabling it at ``t_on``.

    Each sample solves the network with the current inverter outputs, then
    moves ``Q`` (and the VAr-priority ``P`` headroom) toward their targets
    by the exact first-order-lag factor ``1 - exp(-dt/tau)``.
    """
    dyn = dyn or InverterDynamics()
    invs = inverter_states(feeder, scenario, plan, curves)
    net = feeder.network
    if monitored is None:
        monitored = [g.node for g in invs]
    mon = [PhaseNodeId(*m) if isinstance(m, tuple) and not isinstance(m, PhaseNodeId) else m for m in monitored]
    mon_idx = np.array([net.index[m] for m in mon], dtype=int)
    n_steps = int(round(dyn.t_end / dyn.dt)) + 1
    t = np.arange(n_steps) * dyn.dt
    beta = 1.0 - math.exp(-dyn.dt / dyn.tau)
    q = np.zeros(len(invs))
    p = np.array([g.mpp for g in invs])
    vm = np.zeros((n_steps, len(mon)))
    ps = np.zeros((n_steps, len(invs)))
    qs = np.zeros((n_steps, len(invs)))
    history: list[np.ndarray] = []
    qwin: list[np.ndarray] = []
    v = None
    for k in range(n_steps):
        setpoints = {g.id: (float(pk), float(qk)) for g, pk, qk in zip(invs, p, q)}
        sol = solve_nonlinear(feeder, scenario, setpoints, v0=v)
        v = sol.v
        mags = np.abs(v)
        if mags.min() < V_DIVERGE[0] or mags.max() > V_DIVERGE[1]:
            raise Divergence(f"|V| left [{V_DIVERGE[0]}, {V_DIVERGE[1]}] pu at t={t[k]:.4f} s")
        vm[k] = mags[mon_idx]
        ps[k], qs[k] = p, q
        if t[k] + 1e-12 < dyn.t_on or not invs:
            continue
        target = np.array([g.curve.q(mags[g.index]) for g in invs])
        dq = beta * (target - q)
        q = q + dq
        p_target = np.array([g.p_available(qk) for g, qk in zip(invs, q)])
        p = p + beta * (p_target - p)
        history.append(dq)
        qwin.append(q.copy())
        bad = _oscillating(history)
        if bad.size:
            _raise_oscillation(invs, bad, qwin)
    settled, ts = _settling(t, vm, dyn.t_on, dyn.tau) if len(mon) else (True, 0.0)
    return DynamicTrace(t, mon, vm, [g.id for g in invs], ps, qs, settled, ts,
                        {"beta": beta, "tau": dyn.tau, "dt": dyn.dt, "t_on": dyn.t_on})
