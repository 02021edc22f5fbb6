"""Dense bounded-variable simplex.

Every row ``i`` gets a logical variable ``r_i = a_i x`` whose bounds are the
row bounds, so the working system is ``[A  -I] z = 0`` with box bounds on
all of ``z``.  The tableau ``T = B^-1 [A -I]`` is kept explicitly in
Fortran order and updated with a BLAS rank-one kernel.

Primal iterations use a composite phase 1 (minimise the sum of bound
violations of basic variables) that turns into phase 2 once the basis is
feasible.  Pricing is Dantzig's rule; after a run of degenerate pivots the
solver switches to Bland's lowest-index rule until it makes progress
again.  The dual simplex is used to re-optimise after bound changes.

Rows and continuous columns are equilibrated with power-of-two geometric
scaling before the tableau is formed; ``lo``, ``hi``, ``z`` and ``c`` live
in scaled units while :meth:`BoundedSimplex.x`, ``set_bounds`` and
:meth:`BoundedSimplex.result` speak the caller's units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.linalg.blas import dger

from ..errors import NumericalFailure
from .instance import MipInstance, StandardForm

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIVOT_TOL = 1e-9
MIN_PIVOT = 1e-11
REL_PIVOT = 1e-7
DEGENERATE_RUN = 50
REFRESH_EVERY = 100
REFACTOR_EVERY = 2000
SCALE_PASSES = 8


@dataclass
class LPResult:
    status: str
    x: np.ndarray | None
    objective: float
    duals: np.ndarray | None
    iterations: int


class BoundedSimplex:
    """Simplex state for one problem; bounds may be changed between solves."""

    def __init__(self, form: StandardForm, max_iter: int | None = None):
        m, n = form.a.shape
        self.m, self.n = m, n
        row_s, col_s = _equilibrate(form)
        a = np.zeros((m, n + m), order="F")
        if m:
            a[:, :n] = (form.a.multiply(row_s[:, None]).multiply(col_s[None, :])).toarray()
            a[np.arange(m), n + np.arange(m)] = -1.0
        self.A = a
        # external value = internal value * scale
        self.scale = np.concatenate([col_s, 1.0 / row_s])
        self.lo = np.concatenate([form.col_lo, form.row_lo]).astype(float) / self.scale
        self.hi = np.concatenate([form.col_hi, form.row_hi]).astype(float) / self.scale
        self.c = np.concatenate([form.c * col_s, np.zeros(m)]).astype(float)
        self.c0 = form.c0
        self.opt_tol = OPT_TOL * max(1.0, float(np.max(np.abs(self.c), initial=0.0)))
        self.max_iter = max_iter if max_iter is not None else 50 * (m + n) + 1000
        self.iterations = 0
        self.T = None
        self.basis = None
        self.is_basic = None
        self.at_upper = None
        self.z = None
        self.d = None
        self._since_refactor = 0

    # -- state management --------------------------------------------------

    def _nonbasic_values(self) -> None:
        lo, hi = self.lo, self.hi
        nb = ~self.is_basic
        # a variable without a finite lower bound rests at its upper bound
        self.at_upper = np.where(np.isinf(lo) & np.isfinite(hi), True, self.at_upper)
        self.at_upper &= np.isfinite(hi)
        val = np.where(self.at_upper, hi, lo)
        val = np.where(np.isfinite(val), val, 0.0)
        self.z = np.where(nb, val, 0.0)

    def _recompute(self) -> None:
        """Basic values and reduced costs from the current tableau."""
        zn = np.where(self.is_basic, 0.0, self.z)
        self.z[self.basis] = -(self.T @ zn)
        self.d = self.c - self.c[self.basis] @ self.T
        self.d[self.basis] = 0.0

    def _factor(self) -> None:
        b = self.A[:, self.basis]
        lu, piv = sla.lu_factor(b, check_finite=False)
        diag = np.abs(np.diag(lu))
        if diag.size and diag.min() <= 1e-13 * max(1.0, diag.max()):
            raise NumericalFailure("basis matrix is singular")
        self.T = np.asfortranarray(sla.lu_solve((lu, piv), self.A, check_finite=False))
        self.T[:, self.basis] = np.eye(self.m)
        self._since_refactor = 0

    def load_basis(self, basis, at_upper) -> None:
        self.basis = np.array(basis, dtype=np.int64)
        self.is_basic = np.zeros(self.n + self.m, dtype=bool)
        self.is_basic[self.basis] = True
        self.at_upper = np.array(at_upper, dtype=bool)
        self._factor()
        self._nonbasic_values()
        self._recompute()

    def crash(self) -> None:
        """Start from a basis holding as many free structural columns as possible."""
        m, n = self.m, self.n
        free = np.flatnonzero(np.isinf(self.lo[:n]) & np.isinf(self.hi[:n]))
        sel = np.zeros(0, dtype=np.int64)
        covered = np.zeros(0, dtype=np.int64)
        if free.size and m:
            sub = self.A[:, free]
            _, r, piv = sla.qr(sub, mode="economic", pivoting=True)
            dg = np.abs(np.diag(r))
            rank = int(np.sum(dg > 1e-9 * max(dg[0], 1e-300))) if dg.size else 0
            sel = free[np.sort(piv[:rank])]
            if rank:
                p, _, _ = sla.lu(self.A[:, sel])
                covered = p[:, :rank].argmax(axis=0)
        rest = np.setdiff1d(np.arange(m), covered)
        basis = np.concatenate([sel, n + rest])
        self.load_basis(basis, np.zeros(n + m, dtype=bool))

    def snapshot(self):
        return (self.T.copy(order="F"), self.d.copy(), self.z.copy(), self.basis.copy(),
                self.is_basic.copy(), self.at_upper.copy(), self.lo.copy(), self.hi.copy())

    def restore(self, snap) -> None:
        T, d, z, basis, is_basic, at_upper, lo, hi = snap
        self.T = T.copy(order="F")
        self.d, self.z, self.basis = d.copy(), z.copy(), basis.copy()
        self.is_basic, self.at_upper = is_basic.copy(), at_upper.copy()
        self.lo, self.hi = lo.copy(), hi.copy()

    def basis_state(self):
        return self.basis.copy(), self.at_upper.copy()

    def set_bounds(self, idx, lo, hi) -> None:
        """Change structural bounds, keeping nonbasic variables on a bound."""
        idx = np.asarray(idx, dtype=np.int64)
        lo = np.broadcast_to(np.asarray(lo, dtype=float), idx.shape) / self.scale[idx]
        hi = np.broadcast_to(np.asarray(hi, dtype=float), idx.shape) / self.scale[idx]
        for j, l, h in zip(idx, lo, hi):
            if self.lo[j] == l and self.hi[j] == h:
                continue
            self.lo[j], self.hi[j] = l, h
            if self.is_basic[j]:
                continue
            old = self.z[j]
            if self.at_upper[j] and np.isfinite(h):
                new = h
            elif np.isfinite(l):
                new, self.at_upper[j] = l, False
            elif np.isfinite(h):
                new, self.at_upper[j] = h, True
            else:
                new, self.at_upper[j] = 0.0, False
            if new != old:
                self.z[j] = new
                self.z[self.basis] -= self.T[:, j] * (new - old)

    # -- pivoting ------------------------------------------------------------

    def _pivot(self, r: int, q: int) -> None:
        T = self.T
        piv = T[r, q]
        if abs(piv) < MIN_PIVOT:
            raise NumericalFailure(f"pivot {piv:.3e} below {MIN_PIVOT:g}")
        row = T[r, :] / piv
        col = T[:, q].copy()
        col[r] = 0.0
        self.T = T = dger(-1.0, col, row, a=T, overwrite_a=1)
        T[r, :] = row
        T[:, q] = 0.0
        T[r, q] = 1.0
        self.d -= self.d[q] * row
        self.d[q] = 0.0
        leaving = self.basis[r]
        self.is_basic[leaving] = False
        self.is_basic[q] = True
        self.basis[r] = q
        self.iterations += 1
        self._since_refactor += 1
        if self._since_refactor >= REFACTOR_EVERY:
            self._factor()
            self._recompute()
        elif self._since_refactor % REFRESH_EVERY == 0:
            self._recompute()

    def _residual(self) -> float:
        if not self.m:
            return 0.0
        return float(np.max(np.abs(self.A @ self.z)))

    # -- primal --------------------------------------------------------------

    def primal(self) -> str:
        bland = False
        degenerate = 0
        lo, hi = self.lo, self.hi
        while True:
            if self.iterations >= self.max_iter:
                return ITERATION_LIMIT
            basis = self.basis
            zb, lob, hib = self.z[basis], lo[basis], hi[basis]
            below = zb < lob - FEAS_TOL
            above = zb > hib + FEAS_TOL
            phase1 = bool(below.any() or above.any())
            if phase1:
                w = above.astype(float) - below.astype(float)
                d = -(w @ self.T)
                d[basis] = 0.0
            else:
                d = self.d
            nb = ~self.is_basic
            inc = nb & (self.z < hi - FEAS_TOL) & (d < -self.opt_tol)
            dec = nb & (self.z > lo + FEAS_TOL) & (d > self.opt_tol)
            elig = inc | dec
            if not elig.any():
                if phase1:
                    return INFEASIBLE
                if self._residual() > 1e-7:
                    self._factor()
                    self._recompute()
                    continue
                return OPTIMAL
            if bland:
                q = int(np.flatnonzero(elig)[0])
            else:
                q = int(np.argmax(np.where(elig, np.abs(d), -1.0)))
            dirn = 1.0 if inc[q] else -1.0
            alpha = self.T[:, q]
            delta = -dirn * alpha

            ratios = np.full(self.m, np.inf)
            relaxed = np.full(self.m, np.inf)
            piv_tol = PIVOT_TOL
            with np.errstate(invalid="ignore", divide="ignore"):
                down = (delta < -piv_tol) & ~below
                tgt_down = np.where(above, hib, lob)
                ok = down & np.isfinite(tgt_down)
                ratios[ok] = (zb[ok] - tgt_down[ok]) / -delta[ok]
                relaxed[ok] = (zb[ok] - tgt_down[ok] + FEAS_TOL) / -delta[ok]
                up = (delta > piv_tol) & ~above
                tgt_up = np.where(below, lob, hib)
                ok = up & np.isfinite(tgt_up)
                ratios[ok] = (tgt_up[ok] - zb[ok]) / delta[ok]
                relaxed[ok] = (tgt_up[ok] - zb[ok] + FEAS_TOL) / delta[ok]
            np.maximum(ratios, 0.0, out=ratios)
            t_min = ratios.min() if self.m else np.inf
            t_harris = relaxed.min() if self.m else np.inf
            span = hi[q] - lo[q]
            if not np.isfinite(t_min) and not np.isfinite(span):
                if phase1:
                    raise NumericalFailure("phase 1 direction without a blocking row")
                return UNBOUNDED
            if span <= t_min:
                step = span
                self.z[q] += dirn * step
                self.z[basis] += delta * step
                self.at_upper[q] = dirn > 0
                degenerate = 0
                bland = False
                self.iterations += 1
                continue
            if bland:
                ties = ratios <= t_min + 1e-12
                cand = np.flatnonzero(ties)
                r = int(cand[np.argmin(basis[cand])])
            else:
                # Harris: among rows blocking within the tolerance, take the largest pivot
                ties = ratios <= t_harris
                r = int(np.argmax(np.where(ties, np.abs(alpha), -1.0)))
            step = ratios[r]
            leaving = basis[r]
            bound = tgt_down[r] if delta[r] < 0 else tgt_up[r]
            self.z[q] += dirn * step
            self.z[basis] += delta * step
            self.z[leaving] = bound
            self.at_upper[leaving] = bound == hi[leaving] and bound != lo[leaving]
            self._pivot(r, q)
            if step <= 1e-12:
                degenerate += 1
                if degenerate >= DEGENERATE_RUN:
                    bland = True
            else:
                degenerate = 0
                bland = False

    # -- dual ----------------------------------------------------------------

    def dual(self) -> str:
        lo, hi = self.lo, self.hi
        free = np.isinf(lo) & np.isinf(hi)
        fixed = lo == hi
        while True:
            if self.iterations >= self.max_iter:
                return ITERATION_LIMIT
            basis = self.basis
            zb = self.z[basis]
            v_lo = lo[basis] - zb
            v_hi = zb - hi[basis]
            viol = np.maximum(v_lo, v_hi)
            r = int(np.argmax(viol)) if self.m else 0
            if not self.m or viol[r] <= FEAS_TOL:
                return OPTIMAL
            going_down = v_hi[r] > v_lo[r]
            target = hi[basis[r]] if going_down else lo[basis[r]]
            row = self.T[r, :]
            nb = ~self.is_basic & ~fixed
            up = self.at_upper
            piv_tol = max(PIVOT_TOL, REL_PIVOT * float(np.max(np.abs(row[nb]), initial=0.0)))
            if going_down:
                elig = nb & ((~up & ~free & (row > piv_tol)) | (up & (row < -piv_tol)))
            else:
                elig = nb & ((~up & ~free & (row < -piv_tol)) | (up & (row > piv_tol)))
            elig |= nb & free & (np.abs(row) > piv_tol)
            cand = np.flatnonzero(elig)
            if not cand.size:
                return INFEASIBLE
            arow = np.abs(row[cand])
            dabs = np.abs(self.d[cand])
            # Harris: widen the ratio bound by the optimality tolerance, then take the largest pivot
            t_harris = np.min((dabs + self.opt_tol) / arow)
            ties = cand[dabs / arow <= t_harris]
            q = int(ties[np.argmax(np.abs(row[ties]))])
            leaving = basis[r]
            theta = (self.z[leaving] - target) / row[q]
            self.z[basis] -= self.T[:, q] * theta
            self.z[q] += theta
            self.z[leaving] = target
            self.at_upper[leaving] = going_down and not fixed[leaving]
            self._pivot(r, q)

    # -- drivers -------------------------------------------------------------

    def solve(self) -> str:
        self.iterations = 0
        self.crash()
        return self.primal()

    def reoptimize(self) -> str:
        self.iterations = 0
        status = self.dual()
        if status == INFEASIBLE:
            return status
        return self.primal()

    def x(self) -> np.ndarray:
        """Structural values in unscaled units."""
        return self.z[:self.n] * self.scale[:self.n]

    def objective(self) -> float:
        return float(self.c[:self.n] @ self.z[:self.n] + self.c0)

    def result(self, status: str) -> LPResult:
        if status != OPTIMAL:
            return LPResult(status, None, np.nan, None, self.iterations)
        duals = -(self.c[self.basis] @ self.T[:, self.n:]) if self.m else np.zeros(0)
        duals = duals / self.scale[self.n:]
        return LPResult(status, self.x(), self.objective(), duals, self.iterations)


def _equilibrate(form: StandardForm) -> tuple[np.ndarray, np.ndarray]:
    """Row and column factors (powers of two) pulling nonzeros towards one.

    Integer columns keep a unit factor so branching bounds stay integral.
    """
    m, n = form.a.shape
    row_s, col_s = np.ones(m), np.ones(n)
    if not m or not form.a.nnz:
        return row_s, col_s
    a = abs(form.a.tocoo())
    r, c, v = a.row, a.col, a.data
    keep = v > 0
    r, c, lv = r[keep], c[keep], np.log2(v[keep])
    lr, lc = np.zeros(m), np.zeros(n)
    cont = ~np.asarray(form.integer, dtype=bool)
    for _ in range(SCALE_PASSES):
        w = lv + lr[r] + lc[c]
        hi = np.full(m, -np.inf)
        lo = np.full(m, np.inf)
        np.maximum.at(hi, r, w)
        np.minimum.at(lo, r, w)
        ok = np.isfinite(hi)
        lr[ok] -= 0.5 * (hi[ok] + lo[ok])
        w = lv + lr[r] + lc[c]
        hi = np.full(n, -np.inf)
        lo = np.full(n, np.inf)
        np.maximum.at(hi, c, w)
        np.minimum.at(lo, c, w)
        ok = np.isfinite(hi) & cont
        lc[ok] -= 0.5 * (hi[ok] + lo[ok])
    return np.exp2(np.round(lr)), np.exp2(np.round(lc))


def solve_lp(problem, max_iter: int | None = None) -> LPResult:
    """Solve the LP relaxation of a :class:`MipInstance` (or a compiled form).

    Deterministic: identical input gives identical output.  Raises
    :class:`NumericalFailure` when a pivot element falls below ``1e-11``.
    """
    form = problem.compile() if isinstance(problem, MipInstance) else problem
    lp = BoundedSimplex(form, max_iter)
    status = lp.solve()
    return lp.result(status)
