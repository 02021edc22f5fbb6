"""Nonlinear unbalanced power flow and its first-order linearization.

Sign convention: ``I_inj = Y V`` is the current a node pushes into the
network and ``S_inj = V conj(I_inj)`` the matching complex power, so
generation is positive and load negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegeneratePoint, NonConvergence, SingularNetwork
from .feeder import Feeder, PhaseNodeId, Scenario

TOLERANCE = 1e-8
MAX_ITER = 50
MIN_VOLTAGE = 0.1


@dataclass
class PowerFlowSolution:
    """Node voltages, branch and injection currents of one operating point (pu)."""
    nodes: list[PhaseNodeId]
    v: np.ndarray
    i_inj: np.ndarray
    s_inj: np.ndarray
    i_line: np.ndarray
    branch_phases: list[tuple[str, str]]
    converged: bool = True
    iterations: int = 0
    max_mismatch: float = 0.0

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.v)

    def voltage(self, node: PhaseNodeId) -> complex:
        return complex(self.v[self.nodes.index(node)])

    def v_map(self) -> dict[PhaseNodeId, complex]:
        return dict(zip(self.nodes, self.v.tolist()))

    def i_inj_map(self) -> dict[PhaseNodeId, complex]:
        return dict(zip(self.nodes, self.i_inj.tolist()))

    def i_line_map(self) -> dict[tuple[str, str], complex]:
        return dict(zip(self.branch_phases, self.i_line.tolist()))


@dataclass
class LinearizationPoint:
    """Expansion point ``(V_hat, I_inj_hat)`` of the linearized power balance."""
    nodes: list[PhaseNodeId]
    v_hat: np.ndarray
    i_inj_hat: np.ndarray

    def __post_init__(self):
        vm = np.abs(self.v_hat)
        if vm.size and vm.min() < MIN_VOLTAGE:
            k = int(np.argmin(vm))
            raise DegeneratePoint(f"|V| = {vm[k]:.4f} pu at {self.nodes[k]} is below {MIN_VOLTAGE}")

    @property
    def vm_hat(self) -> np.ndarray:
        return np.abs(self.v_hat)


def _setpoint_injections(feeder: Feeder, scenario: Scenario, pv_setpoints) -> np.ndarray:
    """Specified net injection with listed PV units at their ``(P, Q)`` setpoints (pu)."""
    net = feeder.network
    s = scenario.injections(feeder, include_pv=True)
    if pv_setpoints:
        pb = feeder.power_base_kw
        pv = feeder.pv_map
        for gid, (p, q) in pv_setpoints.items():
            k = net.index[pv[gid].node]
            s[k] += complex(p, q) - scenario.mpp.get(gid, 0.0) / pb
    return s


def kcl_residual(feeder: Feeder, v: np.ndarray, s_spec: np.ndarray) -> np.ndarray:
    """Per-node mismatch between branch currents and the specified injection current.

    Slack nodes absorb whatever the network needs, so their entries are zero.
    """
    net = feeder.network
    out_current = np.zeros(net.n, dtype=complex)
    for br in net.branches:
        vf, vt = v[br.from_idx], v[br.to_idx]
        series = np.linalg.solve(br.z, vf - vt)
        np.add.at(out_current, br.from_idx, series + 1j * br.b_half @ vf)
        np.add.at(out_current, br.to_idx, -series + 1j * br.b_half @ vt)
    res = out_current - np.conj(s_spec / v)
    res[net.slack] = 0.0
    return res


def solution_from_state(feeder: Feeder, v: np.ndarray, s_spec: np.ndarray | None = None,
                        converged: bool = True, iterations: int = 0) -> PowerFlowSolution:
    """Wrap a voltage vector; ``s_spec`` fills non-slack injections when given."""
    net = feeder.network
    i_inj = net.y @ v
    s_net = v * np.conj(i_inj)
    if s_spec is None:
        s_inj = s_net
        mismatch = 0.0
    else:
        s_inj = s_spec.astype(complex).copy()
        s_inj[net.slack] = s_net[net.slack]
        mismatch = float(np.max(np.abs((s_net - s_inj)[net.pq]), initial=0.0))
    return PowerFlowSolution(net.nodes, v, i_inj, s_inj, net.line_currents(v), net.branch_phases,
                             converged, iterations, mismatch)


def solve_nonlinear(feeder: Feeder, scenario: Scenario, pv_setpoints=None, v0=None,
                    tol: float = TOLERANCE, max_iter: int = MAX_ITER) -> PowerFlowSolution:
    """Newton iteration on the rectangular current-injection equations.

    ``pv_setpoints`` maps PV ids to ``(P, Q)`` in pu; other units run at MPP
    with zero reactive output.  The substation is held at the scenario's
    feeder-head phasor.  Convergence requires both the power and the
    current mismatch at every non-slack node to fall to ``tol``.
    """
    net = feeder.network
    s_spec = _setpoint_injections(feeder, scenario, pv_setpoints)
    head = scenario.head(feeder)
    v = net.flat_start(head) if v0 is None else np.array(v0, dtype=complex)
    for k in net.slack:
        v[k] = head[net.nodes[k].phase]
    pq, sl = net.pq, net.slack
    if pq.size == 0:
        return solution_from_state(feeder, v, s_spec)
    y = net.y
    y_pp = y[np.ix_(pq, pq)]
    y_ps = y[np.ix_(pq, sl)]
    if np.linalg.cond(y_pp) > 1e14:
        raise SingularNetwork("admittance matrix of the non-slack nodes is rank-deficient")
    sp = s_spec[pq]
    ar, ai = y_pp.real, y_pp.imag
    mismatch = np.inf
    for it in range(max_iter + 1):
        vp = v[pq]
        i_net = y_pp @ vp + y_ps @ v[sl]
        f = i_net - np.conj(sp / vp)
        mismatch = max(np.max(np.abs(vp * np.conj(i_net) - sp)), np.max(np.abs(f)))
        if not np.isfinite(mismatch) or np.max(np.abs(vp)) > 1e3:
            break
        if mismatch <= tol:
            return solution_from_state(feeder, v, s_spec, True, it)
        if it == max_iter:
            break
        b = np.conj(sp) / np.conj(vp) ** 2
        jac = np.block([[ar + np.diag(b.real), -ai + np.diag(b.imag)],
                        [ai + np.diag(b.imag), ar - np.diag(b.real)]])
        try:
            step = np.linalg.solve(jac, -np.concatenate([f.real, f.imag]))
        except np.linalg.LinAlgError:
            break
        m = pq.size
        v[pq] = vp + step[:m] + 1j * step[m:]
    raise NonConvergence(min(it, max_iter), float(mismatch))


def linearize_at(feeder: Feeder, solution: PowerFlowSolution) -> LinearizationPoint:
    """Expansion point taken verbatim from a converged solution."""
    if not solution.converged:
        raise ValueError("cannot linearize at a non-converged solution")
    return LinearizationPoint(list(solution.nodes), solution.v.copy(), solution.i_inj.copy())


def linear_power(lin: LinearizationPoint, v: np.ndarray, i_inj: np.ndarray) -> np.ndarray:
    """First-order expansion of ``V conj(I_inj)`` around ``lin`` (complex, P + jQ)."""
    vh, ih = lin.v_hat, lin.i_inj_hat
    p = (vh.real * i_inj.real + ih.real * v.real + vh.imag * i_inj.imag + ih.imag * v.imag
         - vh.real * ih.real - vh.imag * ih.imag)
    q = (vh.imag * i_inj.real - vh.real * i_inj.imag + ih.real * v.imag - ih.imag * v.real
         - (vh.imag * ih.real - vh.real * ih.imag))
    return p + 1j * q


def linearized_residual(feeder: Feeder, scenario: Scenario, lin: LinearizationPoint,
                        candidate: PowerFlowSolution) -> np.ndarray:
    """Signed residual of the linearized balance at ``candidate`` (complex per node, pu).

    The specified side is the candidate's own net injection, so PV
    setpoints and the slack exchange carried by the candidate are honoured.
    """
    return linear_power(lin, candidate.v, candidate.i_inj) - candidate.s_inj


def nonlinear_mismatch(candidate: PowerFlowSolution) -> np.ndarray:
    return candidate.v * np.conj(candidate.i_inj) - candidate.s_inj


def voltage_magnitude_linear(lin: LinearizationPoint | complex, v):
    """``(Re(V_hat) Re(V) + Im(V_hat) Im(V)) / |V_hat|``; accepts arrays or scalars."""
    vh = lin.v_hat if isinstance(lin, LinearizationPoint) else np.asarray(lin, dtype=complex)
    v = np.asarray(v, dtype=complex)
    return (vh.real * v.real + vh.imag * v.imag) / np.abs(vh)


def dump_solution(solution: PowerFlowSolution, out_dir, prefix: str = "") -> tuple[Path, Path]:
    """Write ``bus,phase,Vr,Vim,Vmag_pu`` and ``line,phase,Ir,Iim`` tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vpath = out / f"{prefix}voltages.csv"
    ipath = out / f"{prefix}currents.csv"
    rows = ["bus,phase,Vr,Vim,Vmag_pu"]
    rows += [f"{n.bus},{n.phase},{v.real:.10f},{v.imag:.10f},{abs(v):.10f}"
             for n, v in zip(solution.nodes, solution.v)]
    vpath.write_text("\n".join(rows) + "\n")
    rows = ["line,phase,Ir,Iim"]
    rows += [f"{b},{p},{i.real:.10f},{i.imag:.10f}" for (b, p), i in zip(solution.branch_phases, solution.i_line)]
    ipath.write_text("\n".join(rows) + "\n")
    return vpath, ipath
