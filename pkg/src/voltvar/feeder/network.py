"""Indexed, per-unit view of a feeder used by the solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import SingularNetwork
from .model import PHASE_SHIFT_DEG, Feeder, PhaseNodeId


@dataclass(frozen=True)
class Branch:
    """A line or transformer between two buses.

    ``z`` is the series impedance over ``phases``; ``b_half`` the shunt
    susceptance placed at each terminal.  ``from_idx``/``to_idx`` are node
    indices, and ``first`` is the index of the branch's first branch-phase.
    """
    id: str
    kind: str
    phases: tuple[str, ...]
    z: np.ndarray
    b_half: np.ndarray
    from_idx: np.ndarray
    to_idx: np.ndarray
    first: int

    @property
    def y_series(self) -> np.ndarray:
        return np.linalg.inv(self.z)


class Network:
    """Node and branch-phase numbering plus the bus admittance matrix.

    ``I_inj = Y @ V`` is the net current leaving each node-phase into the
    network, i.e. generation minus load current.
    """

    def __init__(self, feeder: Feeder):
        if not feeder.per_unit:
            raise ValueError("Network requires a per-unit feeder")
        self.feeder = feeder
        self.nodes: list[PhaseNodeId] = list(feeder.nodes)
        self.index = {n: i for i, n in enumerate(self.nodes)}
        self.n = len(self.nodes)

        branches: list[Branch] = []
        self.branch_phases: list[tuple[str, str]] = []
        for ln in feeder.lines:
            branches.append(self._branch(ln.id, "line", ln.from_bus, ln.to_bus, ln.phases,
                                         ln.z, np.array(ln.b) / 2.0))
        for tr in feeder.transformers:
            k = len(tr.phases)
            z = np.diag(np.array(tr.r) + 1j * np.array(tr.x))
            branches.append(self._branch(tr.id, "transformer", tr.from_bus, tr.to_bus,
                                         tr.phases, z, np.zeros((k, k))))
        self.branches = branches
        self.branch_index = {(bid, p): i for i, (bid, p) in enumerate(self.branch_phases)}
        self.n_branch_phases = len(self.branch_phases)

        self.slack = np.array([self.index[PhaseNodeId(feeder.substation, p)]
                               for p in feeder.bus_map[feeder.substation].phases])
        mask = np.ones(self.n, dtype=bool)
        mask[self.slack] = False
        self.pq = np.flatnonzero(mask)

        y = np.zeros((self.n, self.n), dtype=complex)
        for br in branches:
            try:
                ys = np.linalg.inv(br.z)
            except np.linalg.LinAlgError:
                raise SingularNetwork(f"{br.id}: series impedance matrix is singular") from None
            sh = 1j * br.b_half
            f, t = br.from_idx, br.to_idx
            y[np.ix_(f, f)] += ys + sh
            y[np.ix_(t, t)] += ys + sh
            y[np.ix_(f, t)] -= ys
            y[np.ix_(t, f)] -= ys
        self.y = y
        self.phase_of = np.array([n.phase for n in self.nodes])

    def _branch(self, bid, kind, fb, tb, phases, z, bh) -> Branch:
        first = len(self.branch_phases)
        self.branch_phases.extend((bid, p) for p in phases)
        return Branch(bid, kind, tuple(phases), np.asarray(z, dtype=complex), np.asarray(bh, dtype=float),
                      np.array([self.index[PhaseNodeId(fb, p)] for p in phases]),
                      np.array([self.index[PhaseNodeId(tb, p)] for p in phases]), first)

    def flat_start(self, head: dict[str, complex]) -> np.ndarray:
        """Every node at its phase's substation phasor."""
        return np.array([head[n.phase] if n.phase in head else
                         np.exp(1j * np.deg2rad(PHASE_SHIFT_DEG[n.phase]))
                         for n in self.nodes], dtype=complex)

    def line_currents(self, v: np.ndarray) -> np.ndarray:
        """Sending-end current of every branch-phase (series plus sending half-shunt)."""
        out = np.zeros(self.n_branch_phases, dtype=complex)
        for br in self.branches:
            vf, vt = v[br.from_idx], v[br.to_idx]
            series = np.linalg.solve(br.z, vf - vt)
            out[br.first:br.first + len(br.phases)] = series + 1j * br.b_half @ vf
        return out
