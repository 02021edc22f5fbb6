"""Exact projection of a Q-V encoding block onto ``q`` for fixed voltages.

Every one-hot choice of the segment binaries leaves a linear system in
the two selected weights and ``q``; it is solved from the instance rows
(not from the curve) and kept when consistent and within bounds.
"""

import numpy as np


def encoded_q(inst, enc, vm_var, q_var, vms, tol=1e-9):
    """``(len(vms), segments)`` array of feasible ``q`` per selected segment (nan if none)."""
    vms = np.asarray(vms, float)
    rows = [inst.rows[r] for r in enc.rows]
    out = np.full((vms.size, len(enc.delta)), np.nan)
    for j, (a, b) in enumerate(enc.lam):
        fixed_delta = {d: float(n == j) for n, d in enumerate(enc.delta)}
        if inst.variables[enc.delta[j]].ub < 1.0:
            continue
        unknown = [a, b, q_var]
        m = np.array([[r.coefs.get(u, 0.0) for u in unknown] for r in rows])
        base = np.array([r.rhs - sum(c * fixed_delta.get(k, 0.0) for k, c in r.coefs.items())
                         for r in rows])
        vm_col = np.array([r.coefs.get(vm_var, 0.0) for r in rows])
        rhs = base[:, None] - vm_col[:, None] * vms[None, :]
        sol, *_ = np.linalg.lstsq(m, rhs, rcond=None)
        resid = np.max(np.abs(m @ sol - rhs), axis=0)
        ok = (resid <= tol) & (sol[0] >= -tol) & (sol[1] >= -tol)
        ok &= (sol[2] >= inst.variables[q_var].lb - tol) & (sol[2] <= inst.variables[q_var].ub + tol)
        out[ok, j] = sol[2, ok]
    return out
