"""Two-stage placement of Volt-VAr smart inverters.

The first stage picks which candidate PV units receive a smart inverter.
Every scenario then owns a copy of the linearized network (rectangular
voltages and currents), the on/off logic of each candidate, its Q-V curve
encoding and the rating polygon.  The mixed-integer program is re-solved
around the simulated operating point until the linearized voltages agree
with the nonlinear oracle.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controlsim import parallel_map, volt_var_fixed_point
from .errors import InfeasiblePlacement, ModelAssemblyError, ParseError, ValidationError
from .feeder import PHASES, Feeder, PhaseNodeId, Scenario, validate_scenarios
from .milp import (MipInstance, PiecewiseConvexTerm, add_quadratic_penalty, binding_facets,
                   polygonize_circle, solve_mip)
from .milp.instance import INF
from .powerflow import LinearizationPoint, PowerFlowSolution, linearize_at, solve_nonlinear
from .qvcurve import encode

SUBSTATION_BAND = 1e-4  # pu, allowed drift of the modelled feeder-head phasor
SUBSTATION_SEGMENTS = 4
Q_DIFF_LIMIT = 1.0  # percent
CURTAIL_TOL_KW = 1e-6


class OuterLoopStall(UserWarning):
    """Relinearization did not reach ``eps_lin`` within ``max_outer`` passes."""


@dataclass(frozen=True)
class PlannerConfig:
    """Weights and solver settings.

    ``w_o`` multiplies squared curtailment in kW, ``w_v`` squared deviation
    of the feeder-head voltage components in pu.  ``scenario_weights`` maps
    a scenario id to its own ``(w_o, w_v)``.
    """
    w_c: float = 1.0
    w_o: float = 1e3
    w_v: float = 1e4
    scenario_weights: dict[str, tuple[float, float]] = field(default_factory=dict)
    eps_lin: float = 5e-4
    max_outer: int = 10
    mip_gap: float = 1e-6
    segments: int = 16
    n_sides: int = 32
    voltage_margin: float | None = None
    aggregate_by_bus: bool = False
    node_limit: int = 200_000
    time_limit: float | None = None

    def __post_init__(self):
        ws = [self.w_c, self.w_o, self.w_v] + [w for pair in self.scenario_weights.values() for w in pair]
        if not all(w > 0 for w in ws):
            raise ValueError("all weights must be positive")
        if not self.eps_lin > 0:
            raise ValueError("eps_lin must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")
        if self.margin < 0:
            raise ValueError("voltage_margin must be non-negative")

    @property
    def margin(self) -> float:
        return self.eps_lin if self.voltage_margin is None else self.voltage_margin

    def weights(self, scenario: Scenario) -> tuple[float, float]:
        if scenario.id in self.scenario_weights:
            return self.scenario_weights[scenario.id]
        if scenario.weights is not None:
            return scenario.weights
        return self.w_o, self.w_v


# -- model assembly ---------------------------------------------------------

@dataclass
class CandidateBlock:
    p: int
    q: int
    qqv: int
    on: int
    curtail: int | None
    encoding: object


@dataclass
class ScenarioBlock:
    """Variable indices of one scenario's copy of the network."""
    scenario: Scenario
    vr: np.ndarray
    vi: np.ndarray
    ir: np.ndarray
    ii: np.ndarray
    vm: np.ndarray
    lr: np.ndarray
    li: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    sub_pen: list[int]
    cands: dict[str, CandidateBlock]


@dataclass
class ExtensiveForm:
    instance: MipInstance
    keys: list[str]                 # first-stage decision keys
    x: dict[str, int]               # key -> binary
    key_of: dict[str, str]          # candidate id -> key
    blocks: dict[str, ScenarioBlock]


def _tag(node: PhaseNodeId) -> str:
    return f"{node.bus}.{node.phase}"


def placement_key(unit, aggregate_by_bus: bool) -> str:
    return unit.bus if aggregate_by_bus else unit.id


def build_extensive_form(feeder: Feeder, scenarios: list[Scenario],
                         lin: dict[str, LinearizationPoint],
                         config: PlannerConfig | None = None) -> ExtensiveForm:
    """Deterministic equivalent of the two-stage placement problem."""
    config = config or PlannerConfig()
    pu = feeder.pu
    net = feeder.network
    pb = feeder.power_base_kw
    inst = MipInstance(name="placement")
    cands = pu.candidates
    for g in cands:
        if g.curve is None:
            raise ModelAssemblyError("qv-curve", f"candidate {g.id} has no Q-V curve")

    keys, key_of, x = [], {}, {}
    for g in cands:
        k = placement_key(g, config.aggregate_by_bus)
        key_of[g.id] = k
        if k not in x:
            keys.append(k)
            x[k] = inst.add_var(f"x.{k}", 0.0, 1.0, binary=True, obj=config.w_c, priority=2,
                                   direction=1)

    blocks = {}
    for s in scenarios:
        if s.id not in lin:
            raise ModelAssemblyError("linearization", f"no linearization point for scenario {s.id}")
        pt = lin[s.id]
        if len(pt.v_hat) != net.n:
            raise ModelAssemblyError("linearization", f"scenario {s.id}: point has {len(pt.v_hat)} "
                                                      f"nodes, network has {net.n}")
        blocks[s.id] = _scenario_block(inst, feeder, s, pt, config, x, key_of)
    return ExtensiveForm(inst, keys, x, key_of, blocks)


def _scenario_block(inst: MipInstance, feeder: Feeder, s: Scenario, pt: LinearizationPoint,
                    config: PlannerConfig, x: dict[str, int], key_of: dict[str, str]) -> ScenarioBlock:
    pu = feeder.pu
    net = feeder.network
    pb = feeder.power_base_kw
    sid = s.id
    prob = s.probability if s.probability is not None else 1.0
    w_o, w_v = config.weights(s)
    margin = config.margin
    slack = set(net.slack.tolist())

    def var(name, lb=-INF, ub=INF, **kw):
        return inst.add_var(f"{sid}.{name}", lb, ub, **kw)

    def row(name, coefs, sense, rhs):
        merged: dict[int, float] = {}
        for j, a in coefs:
            merged[j] = merged.get(j, 0.0) + a
        return inst.add_row(f"{sid}.{name}", {j: a for j, a in merged.items() if a != 0.0}, sense, rhs)

    tags = [_tag(n) for n in net.nodes]
    vr = np.array([var(f"vr.{t}") for t in tags])
    vi = np.array([var(f"vi.{t}") for t in tags])
    ir = np.array([var(f"ir.{t}") for t in tags])
    ii = np.array([var(f"ii.{t}") for t in tags])
    vm = np.array([var(f"vm.{t}", 0.0, INF) if k in slack else
                   var(f"vm.{t}", feeder.v_min + margin, feeder.v_max - margin)
                   for k, t in enumerate(tags)])
    if feeder.v_max - feeder.v_min <= 2 * margin:
        raise ModelAssemblyError("voltage-bounds", "voltage margin leaves an empty band")
    bp = [f"{b}.{p}" for b, p in net.branch_phases]
    lr = np.array([var(f"lr.{t}") for t in bp])
    li = np.array([var(f"li.{t}") for t in bp])

    # feeder head: phasor held near the measurement and pulled onto it
    head = s.head(feeder)
    pg, qg, sub_pen = [], [], []
    for k in net.slack:
        ph = net.nodes[k].phase
        pg.append(var(f"pg.{ph}"))
        qg.append(var(f"qg.{ph}"))
        for comp, j, val in (("r", vr[k], head[ph].real), ("i", vi[k], head[ph].imag)):
            inst.set_bounds(j, val - SUBSTATION_BAND, val + SUBSTATION_BAND)
            term = PiecewiseConvexTerm(j, val, prob * w_v, SUBSTATION_BAND, SUBSTATION_SEGMENTS,
                                       label=f"{sid}.sub.{ph}{comp}")
            sub_pen.append(add_quadratic_penalty(inst, term, f"{sid}.pen_v{comp}.{ph}"))
    slack_pos = {int(k): n for n, k in enumerate(net.slack)}

    # series branches: V_from - V_to = Z (I - j Bh V_from)
    for br in net.branches:
        r, xm = br.z.real, br.z.imag
        rb, xb = r @ br.b_half, xm @ br.b_half
        f, t = br.from_idx, br.to_idx
        sl = slice(br.first, br.first + len(br.phases))
        lrs, lis = lr[sl], li[sl]
        for a, ph in enumerate(br.phases):
            re = [(vr[f[a]], 1.0), (vr[t[a]], -1.0)]
            im = [(vi[f[a]], 1.0), (vi[t[a]], -1.0)]
            for b in range(len(br.phases)):
                re += [(lrs[b], -r[a, b]), (lis[b], xm[a, b]), (vi[f[b]], -rb[a, b]), (vr[f[b]], -xb[a, b])]
                im += [(lrs[b], -xm[a, b]), (lis[b], -r[a, b]), (vi[f[b]], -xb[a, b]), (vr[f[b]], rb[a, b])]
            row(f"flow_r.{br.id}.{ph}", re, "=", 0.0)
            row(f"flow_i.{br.id}.{ph}", im, "=", 0.0)

    # nodal current: injection = sending currents - currents arriving through branches
    inj_r = {k: [(ir[k], 1.0)] for k in range(net.n)}
    inj_i = {k: [(ii[k], 1.0)] for k in range(net.n)}
    for br in net.branches:
        f, t = br.from_idx, br.to_idx
        for a in range(len(br.phases)):
            j = br.first + a
            inj_r[f[a]].append((lr[j], -1.0))
            inj_i[f[a]].append((li[j], -1.0))
            inj_r[t[a]].append((lr[j], 1.0))
            inj_i[t[a]].append((li[j], 1.0))
            for b in range(len(br.phases)):
                bh = br.b_half[a, b]
                if bh:
                    inj_r[t[a]] += [(vi[f[b]], bh), (vi[t[b]], bh)]
                    inj_i[t[a]] += [(vr[f[b]], -bh), (vr[t[b]], -bh)]
    for k, tg in enumerate(tags):
        row(f"kcl_r.{tg}", inj_r[k], "=", 0.0)
        row(f"kcl_i.{tg}", inj_i[k], "=", 0.0)

    # candidates
    fixed = s.injections(feeder, include_pv=True)
    cand_at: dict[int, list[tuple[int, int]]] = {}
    cblocks = {}
    for g in pu.candidates:
        k = net.index[g.node]
        mpp = s.mpp.get(g.id, 0.0) / pb
        fixed[k] -= mpp
        qmax = g.q_max
        tg = f"{g.id}"
        p = var(f"p.{tg}", 0.0, mpp)
        q = var(f"q.{tg}", -qmax, qmax)
        qqv = var(f"qqv.{tg}", -qmax, qmax)
        on = var(f"on.{tg}", 0.0, 1.0, binary=True, priority=1, direction=1)
        row(f"placed.{tg}", [(on, 1.0), (x[key_of[g.id]], -1.0)], "<=", 0.0)
        if mpp > 0:
            row(f"off_p.{tg}", [(p, 1.0), (on, mpp)], ">=", mpp)
        row(f"off_qu.{tg}", [(q, 1.0), (on, -qmax)], "<=", 0.0)
        row(f"off_ql.{tg}", [(q, 1.0), (on, qmax)], ">=", 0.0)
        # when off, Q = 0 already, so |Q - Qqv| <= qmax bounds the slack
        row(f"on_qu.{tg}", [(q, 1.0), (qqv, -1.0), (on, qmax)], "<=", qmax)
        row(f"on_ql.{tg}", [(q, 1.0), (qqv, -1.0), (on, -qmax)], ">=", -qmax)
        facets = binding_facets(polygonize_circle(g.s_rating, config.n_sides), (0.0, mpp), (-qmax, qmax))
        for n, (ap, aq, rhs) in enumerate(facets):
            row(f"rating{n}.{tg}", [(p, ap), (q, aq)], "<=", rhs)
        enc = encode(inst, g.curve, int(vm[k]), qqv, prefix=f"{sid}.qv.{tg}")
        curtail = None
        if mpp > 0:
            term = PiecewiseConvexTerm(p, mpp, prob * w_o * pb * pb, mpp, config.segments,
                                       label=f"{sid}.curtail.{tg}")
            curtail = add_quadratic_penalty(inst, term, f"{sid}.pen_p.{tg}")
        cand_at.setdefault(k, []).append((p, q))
        cblocks[g.id] = CandidateBlock(p, q, qqv, on, curtail, enc)

    # linearized power balance and magnitude
    vh, ih = pt.v_hat, pt.i_inj_hat
    for k, tg in enumerate(tags):
        a, b = vh[k].real, vh[k].imag
        c, d = ih[k].real, ih[k].imag
        pr = [(ir[k], a), (ii[k], b), (vr[k], c), (vi[k], d)]
        qr = [(ir[k], b), (ii[k], -a), (vi[k], c), (vr[k], -d)]
        if k in slack_pos:
            pr.append((pg[slack_pos[k]], -1.0))
            qr.append((qg[slack_pos[k]], -1.0))
        for pj, qj in cand_at.get(k, []):
            pr.append((pj, -1.0))
            qr.append((qj, -1.0))
        row(f"bal_p.{tg}", pr, "=", fixed[k].real + a * c + b * d)
        row(f"bal_q.{tg}", qr, "=", fixed[k].imag + b * c - a * d)
        mag = abs(vh[k])
        row(f"vmag.{tg}", [(vm[k], 1.0), (vr[k], -a / mag), (vi[k], -b / mag)], "=", 0.0)

    return ScenarioBlock(s, vr, vi, ir, ii, vm, lr, li, np.array(pg), np.array(qg), sub_pen, cblocks)


def model_size(form: ExtensiveForm) -> dict[str, int]:
    inst = form.instance
    return {"variables": inst.n_vars, "rows": inst.n_rows, "binaries": len(inst.binaries)}


def replay_point(form: ExtensiveForm, feeder: Feeder, states: dict[str, PowerFlowSolution],
                 placed=(), on: dict[str, set[str]] | None = None,
                 setpoints: dict[str, dict[str, tuple[float, float]]] | None = None) -> np.ndarray:
    """Full variable vector for given per-scenario operating points.

    Candidates not listed as on run at MPP with ``Q = 0``; those that are
    on take their ``(P, Q)`` from ``setpoints`` (pu).  Curve weights are
    placed on the segment containing the linearized magnitude.
    """
    inst = form.instance
    net = feeder.network
    pu = feeder.pu
    z = np.zeros(inst.n_vars)
    placed = set(placed)
    for k, j in form.x.items():
        z[j] = 1.0 if k in placed else 0.0
    for sid, blk in form.blocks.items():
        sol = states[sid]
        z[blk.vr], z[blk.vi] = sol.v.real, sol.v.imag
        z[blk.ir], z[blk.ii] = sol.i_inj.real, sol.i_inj.imag
        z[blk.lr], z[blk.li] = sol.i_line.real, sol.i_line.imag
        z[blk.pg] = sol.s_inj[net.slack].real
        z[blk.qg] = sol.s_inj[net.slack].imag
        ons = (on or {}).get(sid, set())
        for gid, cb in blk.cands.items():
            g = pu.pv_map[gid]
            mpp = blk.scenario.mpp.get(gid, 0.0) / feeder.power_base_kw
            p, q = ((setpoints or {}).get(sid, {}).get(gid, (mpp, 0.0)) if gid in ons else (mpp, 0.0))
            z[cb.p], z[cb.q], z[cb.on] = p, q, float(gid in ons)
        # magnitudes follow from the vmag rows
        for k, j in enumerate(blk.vm):
            r = inst.rows[inst.row(f"{sid}.vmag.{_tag(net.nodes[k])}")]
            z[j] = -sum(a * z[c] for c, a in r.coefs.items() if c != j)
        for gid, cb in blk.cands.items():
            g = pu.pv_map[gid]
            curve = g.curve
            vmk = z[blk.vm[net.index[g.node]]]
            vb = curve.v_break
            seg = int(np.clip(np.searchsorted(vb, vmk, side="right") - 1, 0, len(vb) - 2))
            t = (vmk - vb[seg]) / (vb[seg + 1] - vb[seg])
            for n, d in enumerate(cb.encoding.delta):
                z[d] = 1.0 if n == seg else 0.0
            a, b = cb.encoding.lam[seg]
            z[a], z[b] = 1.0 - t, t
            z[cb.qqv] = curve.q(vmk)
    for term in inst.penalties:
        z[term.epigraph] = float(term.evaluate(z[term.var]))
    return z


# -- plan -------------------------------------------------------------------

@dataclass
class ScenarioPlan:
    """MIP operating point of one scenario (pu unless stated)."""
    id: str
    probability: float
    on: dict[str, int]
    p: dict[str, float]
    q: dict[str, float]
    q_qv: dict[str, float]
    mpp: dict[str, float]
    v: np.ndarray
    vm_lin: np.ndarray
    i_line: np.ndarray
    pg: np.ndarray
    qg: np.ndarray
    oracle_gap: float = math.nan

    @property
    def active(self) -> list[str]:
        return [g for g, f in self.on.items() if f]


@dataclass
class PlacementPlan:
    feeder_name: str
    candidates: list[tuple[str, str, str]]       # (id, bus, phase)
    x_pv: dict[str, int]
    scenarios: dict[str, ScenarioPlan] = field(default_factory=dict)
    objective: dict[str, float] = field(default_factory=dict)
    outer_iterations: int = 0
    stalled: bool = False
    mip_gap: float = 0.0
    nodes: list[PhaseNodeId] = field(default_factory=list)
    sub_phases: list[str] = field(default_factory=list)

    @property
    def placed_ids(self) -> list[str]:
        return [g for g, _, _ in self.candidates if self.x_pv.get(g)]

    @property
    def n_placed(self) -> int:
        return len(self.placed_ids)

    def per_phase(self) -> dict[str, int]:
        out = {p: 0 for p in PHASES}
        for g, _, ph in self.candidates:
            if self.x_pv.get(g):
                out[ph] += 1
        return out

    def summary_text(self) -> str:
        n = self.n_placed
        if n == 0:
            return "0 upgrades"
        counts = self.per_phase()
        parts = [f"{counts[p]} on phase {p.upper()}" for p in PHASES if counts[p]]
        return f"{n} upgrades: " + ", ".join(parts)

    def without(self, gid: str) -> "PlacementPlan":
        """Copy with one inverter removed everywhere (for tamper tests)."""
        out = PlacementPlan(self.feeder_name, list(self.candidates), dict(self.x_pv), {},
                            dict(self.objective), self.outer_iterations, self.stalled,
                            self.mip_gap, list(self.nodes), list(self.sub_phases))
        out.x_pv[gid] = 0
        for sid, sp in self.scenarios.items():
            on = dict(sp.on)
            on[gid] = 0
            out.scenarios[sid] = ScenarioPlan(sp.id, sp.probability, on, sp.p, sp.q, sp.q_qv, sp.mpp,
                                              sp.v, sp.vm_lin, sp.i_line, sp.pg, sp.qg, sp.oracle_gap)
        return out


def _extract(form: ExtensiveForm, feeder: Feeder, sol, config: PlannerConfig) -> PlacementPlan:
    z = sol.x
    pu = feeder.pu
    net = feeder.network
    pb = feeder.power_base_kw
    keys = {k: int(round(z[j])) for k, j in form.x.items()}
    cands = [(g.id, g.bus, g.phase) for g in pu.candidates]
    plan = PlacementPlan(feeder.name, cands, {g: keys[form.key_of[g]] for g, _, _ in cands},
                         mip_gap=sol.gap, nodes=list(net.nodes),
                         sub_phases=[net.nodes[k].phase for k in net.slack])
    curtail_exact = sub_exact = curtail_epi = sub_epi = 0.0
    for sid, blk in form.blocks.items():
        s = blk.scenario
        on, p, q, qqv, mpp = {}, {}, {}, {}, {}
        for gid, cb in blk.cands.items():
            on[gid] = int(round(z[cb.on]))
            p[gid], q[gid], qqv[gid] = float(z[cb.p]), float(z[cb.q]), float(z[cb.qqv])
            mpp[gid] = s.mpp.get(gid, 0.0) / pb
        plan.scenarios[sid] = ScenarioPlan(
            sid, s.probability, on, p, q, qqv, mpp, z[blk.vr] + 1j * z[blk.vi], z[blk.vm].copy(),
            z[blk.lr] + 1j * z[blk.li], z[blk.pg].copy(), z[blk.qg].copy())
    for term in form.instance.penalties:
        exact = term.weight * (z[term.var] - term.center) ** 2
        if ".curtail." in term.label:
            curtail_exact += exact
            curtail_epi += z[term.epigraph]
        else:
            sub_exact += exact
            sub_epi += z[term.epigraph]
    plan.objective = {
        "total": float(sol.objective),
        "placement": float(config.w_c * sum(keys.values())),
        "curtailment": float(curtail_epi),
        "curtailment_exact": float(curtail_exact),
        "feeder_head": float(sub_epi),
        "feeder_head_exact": float(sub_exact),
    }
    return plan


# -- oracle checks ----------------------------------------------------------

def base_case(feeder: Feeder, scenarios: list[Scenario]) -> dict[str, PowerFlowSolution]:
    """Nonlinear solution of every scenario with no smart inverter active."""
    sols = parallel_map(lambda s: solve_nonlinear(feeder, s), scenarios)
    return {s.id: sol for s, sol in zip(scenarios, sols)}


def voltage_violations(feeder: Feeder, sid: str, sol: PowerFlowSolution, tol: float = 1e-9):
    out = []
    for n, vmag in zip(sol.nodes, sol.vm):
        if vmag > feeder.v_max + tol:
            out.append((sid, n.bus, n.phase, float(vmag), "max"))
        elif vmag < feeder.v_min - tol:
            out.append((sid, n.bus, n.phase, float(vmag), "min"))
    return out


def worst_node(feeder: Feeder, sols: dict[str, PowerFlowSolution]):
    """``(scenario, bus, phase, vmag, bound)`` of the node closest to or furthest past a bound."""
    best, worst = -math.inf, None
    for sid, sol in sols.items():
        for n, vmag in zip(sol.nodes, sol.vm):
            for excess, side, bound in ((vmag - feeder.v_max, "max", feeder.v_max),
                                        (feeder.v_min - vmag, "min", feeder.v_min)):
                if excess > best:
                    best, worst = excess, (sid, n.bus, n.phase, float(vmag), bound)
    return worst


def _simulate(feeder: Feeder, scenarios: list[Scenario], plan: PlacementPlan, alpha: float = 0.5):
    return dict(zip([s.id for s in scenarios], parallel_map(
        lambda s: volt_var_fixed_point(feeder, s, plan.scenarios[s.id].active, alpha), scenarios)))


def _oracle_gap(sp: ScenarioPlan, sim_sol: PowerFlowSolution) -> float:
    return float(np.max(np.abs(sp.vm_lin - sim_sol.vm))) if sp.vm_lin.size else 0.0


# -- outer loop -------------------------------------------------------------

def solve_placement(feeder: Feeder, scenarios: list[Scenario],
                    config: PlannerConfig | None = None) -> PlacementPlan:
    """Place the fewest smart inverters that keep every scenario within bounds.

    Starts from the base case (no inverter active), solves the MIP, checks
    the plan against the Volt-VAr fixed point and relinearizes there until
    the largest voltage gap is at most ``eps_lin``.  On a stall the plan
    with the fewest oracle violations (then smallest gap) is returned with
    ``stalled`` set and an :class:`OuterLoopStall` warning.
    """
    config = config or PlannerConfig()
    scenarios = validate_scenarios(list(scenarios), feeder)
    base = base_case(feeder, scenarios)
    lin = {sid: linearize_at(feeder, sol) for sid, sol in base.items()}
    best, best_key = None, None
    for it in range(1, config.max_outer + 1):
        form = build_extensive_form(feeder, scenarios, lin, config)
        sol = solve_mip(form.instance, rel_gap=config.mip_gap, node_limit=config.node_limit,
                        time_limit=config.time_limit)
        if sol.x is None:
            if best is not None:
                break
            worst = worst_node(feeder, base)
            sid, bus, ph, vmag, bound = worst
            raise InfeasiblePlacement(
                f"no placement keeps voltages within [{feeder.v_min}, {feeder.v_max}]; worst base-case "
                f"node {bus}.{ph} in scenario {sid} at {vmag:.4f} pu (bound {bound})", worst)
        plan = _extract(form, feeder, sol, config)
        plan.outer_iterations = it
        sims = _simulate(feeder, scenarios, plan)
        n_viol = 0
        for sid, fp in sims.items():
            plan.scenarios[sid].oracle_gap = _oracle_gap(plan.scenarios[sid], fp.solution)
            n_viol += len(voltage_violations(feeder, sid, fp.solution))
        gap = max(sp.oracle_gap for sp in plan.scenarios.values())
        key = (n_viol, gap)
        if best_key is None or key < best_key:
            best, best_key = plan, key
        if gap <= config.eps_lin:
            return plan
        lin = {sid: linearize_at(feeder, fp.solution) for sid, fp in sims.items()}
    best.stalled = True
    warnings.warn(f"relinearization stalled: best oracle gap {best_key[1]:.2e} pu with "
                  f"{best_key[0]} violations after {config.max_outer} passes", OuterLoopStall)
    return best


# -- verification -----------------------------------------------------------

@dataclass
class VerificationReport:
    violations: list[tuple[str, str, str, float, str]]
    q_diff_pct: dict[str, float]
    curtailment_kw: dict[str, float]
    voltage_gap: dict[str, float]
    q_plan: dict[str, dict[str, float]]
    q_sim: dict[str, dict[str, float]]
    dv: dict[str, np.ndarray] = field(default_factory=dict)  # simulated minus planned |V|

    @property
    def voltage_ok(self) -> bool:
        return not self.violations

    @property
    def curtailment_ok(self) -> bool:
        return all(c <= CURTAIL_TOL_KW for c in self.curtailment_kw.values())

    @property
    def q_ok(self) -> bool:
        return all(d <= Q_DIFF_LIMIT for d in self.q_diff_pct.values())

    @property
    def passed(self) -> bool:
        return self.voltage_ok and self.curtailment_ok and self.q_ok

    def lines(self) -> list[str]:
        def tag(ok):
            return "PASS" if ok else "FAIL"
        out = [f"{tag(self.voltage_ok)} voltage: {len(self.violations)} node-phase violations"]
        total = sum(self.curtailment_kw.values())
        out.append(f"{tag(self.curtailment_ok)} curtailment: {total:.6f} kW")
        worst = max(self.q_diff_pct.values(), default=0.0)
        out.append(f"{tag(self.q_ok)} q-difference: {worst:.4f}% (limit {Q_DIFF_LIMIT}%)")
        for sid in self.q_diff_pct:
            out.append(f"  scenario {sid}: q-diff {self.q_diff_pct[sid]:.4f}%, "
                       f"curtailment {self.curtailment_kw[sid]:.6f} kW, "
                       f"max |dV| {self.voltage_gap[sid]:.2e} pu")
        return out


def q_difference_pct(feeder: Feeder, q_plan: dict[str, float], q_sim: dict[str, float]) -> float:
    """Mean of ``((Q_plan - Q_sim) / Q_max)**2`` over the inverters, in percent."""
    if not q_sim:
        return 0.0
    pu = feeder.pu
    terms = [((q_plan.get(g, 0.0) - qs) / pu.pv_map[g].q_max) ** 2 for g, qs in q_sim.items()]
    return 100.0 * float(np.mean(terms))


def verify_plan(feeder: Feeder, scenarios: list[Scenario], plan: PlacementPlan,
                alpha: float = 0.5) -> VerificationReport:
    """Replay the plan through the Volt-VAr fixed point of every scenario."""
    scenarios = validate_scenarios(list(scenarios), feeder)
    for s in scenarios:
        if s.id not in plan.scenarios:
            raise ValidationError(f"plan has no entry for scenario {s.id}", s.id)
    pb = feeder.power_base_kw
    sims = _simulate(feeder, scenarios, plan, alpha)
    viol, qd, curt, gap, qp, qs, dv = [], {}, {}, {}, {}, {}, {}
    for s in scenarios:
        sp = plan.scenarios[s.id]
        fp = sims[s.id]
        viol += voltage_violations(feeder, s.id, fp.solution)
        qs[s.id] = fp.q
        qp[s.id] = {g: sp.q.get(g, 0.0) for g in fp.q}
        qd[s.id] = q_difference_pct(feeder, qp[s.id], qs[s.id])
        curt[s.id] = float(sum(max(0.0, s.mpp.get(g, 0.0) / pb - p) for g, p in fp.p.items()) * pb)
        if sp.vm_lin.size == len(fp.solution.vm):
            gap[s.id] = _oracle_gap(sp, fp.solution)
            dv[s.id] = fp.solution.vm - sp.vm_lin
        else:
            gap[s.id] = math.nan
    return VerificationReport(viol, qd, curt, gap, qp, qs, dv)


# -- files ------------------------------------------------------------------

def _f(x: float) -> str:
    return f"{0.0 if abs(x) < 1e-12 else x:.10g}"


def format_plan(plan: PlacementPlan) -> str:
    lines = ["# voltvar placement plan", f"feeder {plan.feeder_name}",
             f"outer_iterations {plan.outer_iterations}", f"stalled {int(plan.stalled)}",
             "", "[placement]", "# id bus phase placed"]
    lines += [f"{g} {b} {p} {plan.x_pv.get(g, 0)}" for g, b, p in plan.candidates]
    for sid, sp in plan.scenarios.items():
        lines += ["", f"[setpoints {sid}]", f"probability {_f(sp.probability)}",
                  "# id on P_pu Q_pu Qqv_pu MPP_pu"]
        lines += [f"{g} {sp.on[g]} {_f(sp.p[g])} {_f(sp.q[g])} {_f(sp.q_qv[g])} {_f(sp.mpp[g])}"
                  for g in sp.on]
    return "\n".join(lines) + "\n"


def parse_plan(text: str, path: str | None = None) -> PlacementPlan:
    plan = PlacementPlan("feeder", [], {})
    section, sid = None, None
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if line.startswith("["):
                head = line.strip("[]").split()
                section = head[0]
                if section == "setpoints":
                    sid = head[1]
                    plan.scenarios[sid] = ScenarioPlan(sid, math.nan, {}, {}, {}, {}, {},
                                                       np.zeros(0, complex), np.zeros(0), np.zeros(0, complex),
                                                       np.zeros(0), np.zeros(0))
                elif section != "placement":
                    raise ValueError(f"unknown section {section}")
            elif section is None:
                if tok[0] == "feeder":
                    plan.feeder_name = tok[1]
                elif tok[0] == "outer_iterations":
                    plan.outer_iterations = int(tok[1])
                elif tok[0] == "stalled":
                    plan.stalled = bool(int(tok[1]))
            elif section == "placement":
                g, b, p, placed = tok
                if placed not in ("0", "1"):
                    raise ValueError(f"placed flag must be 0 or 1, got {placed}")
                plan.candidates.append((g, b, p))
                plan.x_pv[g] = int(placed)
            elif section == "setpoints":
                sp = plan.scenarios[sid]
                if tok[0] == "probability":
                    sp.probability = float(tok[1])
                    continue
                g, on, p, q, qqv, mpp = tok
                sp.on[g] = int(on)
                sp.p[g], sp.q[g], sp.q_qv[g], sp.mpp[g] = float(p), float(q), float(qqv), float(mpp)
        except (ValueError, IndexError) as exc:
            raise ParseError(f"malformed plan line: {raw.strip()} ({exc})", path, ln) from None
    for sp in plan.scenarios.values():
        bad = [g for g, f in sp.on.items() if f and not plan.x_pv.get(g)]
        if bad:
            raise ParseError(f"scenario {sp.id}: {bad[0]} is on but not placed", path)
    return plan


def load_plan(path) -> PlacementPlan:
    return parse_plan(Path(path).read_text(), str(path))


def plan_summary(plan: PlacementPlan) -> dict:
    return {
        "feeder": plan.feeder_name,
        "placements": plan.n_placed,
        "placed": plan.placed_ids,
        "per_phase": {p.upper(): n for p, n in plan.per_phase().items()},
        "summary": plan.summary_text(),
        "objective": {k: round(v, 10) for k, v in plan.objective.items()},
        "outer_iterations": plan.outer_iterations,
        "stalled": plan.stalled,
        "mip_gap": round(plan.mip_gap, 12),
        "oracle_gap_pu": {sid: round(sp.oracle_gap, 10) for sid, sp in plan.scenarios.items()},
    }


def write_plan(plan: PlacementPlan, out_dir) -> list[Path]:
    """``placement.plan``, ``summary.json`` and one operating-point table per scenario."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "placement.plan", out / "summary.json"]
    paths[0].write_text(format_plan(plan))
    paths[1].write_text(json.dumps(plan_summary(plan), indent=2, sort_keys=True) + "\n")
    for sid, sp in plan.scenarios.items():
        if not sp.v.size:
            continue
        path = out / f"operating_point_{sid}.csv"
        rows = ["bus,phase,Vr,Vim,Vmag_lin_pu"]
        rows += [f"{n.bus},{n.phase},{v.real:.10f},{v.imag:.10f},{m:.10f}"
                 for n, v, m in zip(plan.nodes, sp.v, sp.vm_lin)]
        rows += ["", "phase,PG_pu,QG_pu"]
        rows += [f"{ph},{pg:.10f},{qg:.10f}" for ph, pg, qg in zip(plan.sub_phases, sp.pg, sp.qg)]
        path.write_text("\n".join(rows) + "\n")
        paths.append(path)
    return paths


def read_operating_points(plan: PlacementPlan, directory) -> PlacementPlan:
    """Fill linearized voltages from ``operating_point_{sid}.csv`` files when present."""
    directory = Path(directory)
    for sid, sp in plan.scenarios.items():
        path = directory / f"operating_point_{sid}.csv"
        if not path.is_file():
            continue
        nodes, v, vm = [], [], []
        for ln, raw in enumerate(path.read_text().splitlines()[1:], 2):
            if not raw.strip():
                break
            try:
                bus, ph, vr, vi, m = raw.split(",")
                nodes.append(PhaseNodeId(bus, ph))
                v.append(complex(float(vr), float(vi)))
                vm.append(float(m))
            except ValueError as exc:
                raise ParseError(f"malformed operating point row ({exc})", str(path), ln) from None
        if plan.nodes and nodes != plan.nodes:
            raise ParseError("operating point node order differs from the other scenarios", str(path))
        plan.nodes = nodes
        sp.v, sp.vm_lin = np.array(v, dtype=complex), np.array(vm)
    return plan
