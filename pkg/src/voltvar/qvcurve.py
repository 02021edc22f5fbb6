"""Volt-VAr droop curve: evaluation, inverter ratings and the exact MIP encoding.

The curve has six voltage breakpoints ``v1..v6``; reactive output is
``+q_max`` on ``[v1, v2]``, ramps to zero on ``[v2, v3]``, stays zero on the
deadband ``[v3, v4]``, ramps to ``-q_max`` on ``[v4, v5]`` and saturates on
``[v5, v6]``.  Outside ``[v1, v6]`` the curve is held at its end value.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DomainError, InvalidCurve

#: Breakpoints used for every candidate unless a feeder overrides them.
DEFAULT_BREAKPOINTS = (0.0, 0.94, 0.98, 1.02, 1.06, 1.1)
N_SEGMENTS = 5


@dataclass(frozen=True)
class QVCurve:
    v_break: tuple[float, float, float, float, float, float]
    q_max: float

    def __post_init__(self):
        v = tuple(float(x) for x in self.v_break)
        object.__setattr__(self, "v_break", v)
        object.__setattr__(self, "q_max", float(self.q_max))
        validate_breakpoints(v)
        if not self.q_max > 0:
            raise InvalidCurve(f"q_max must be positive, got {self.q_max}")

    @property
    def q_break(self) -> tuple[float, ...]:
        q = self.q_max
        return (q, q, 0.0, 0.0, -q, -q)

    def q(self, vm):
        """Reactive power for voltage magnitude(s) ``vm`` (array friendly)."""
        return np.interp(vm, self.v_break, self.q_break)

    @property
    def max_slope(self) -> float:
        """Lipschitz constant of the curve (``q_max`` over the narrowest ramp)."""
        v = self.v_break
        return self.q_max / min(v[2] - v[1], v[4] - v[3])

    def steepened(self, factor: float) -> "QVCurve":
        """Same deadband and saturation levels with both ramps ``factor`` times steeper.

        The ramps shrink toward the deadband edges ``v3`` and ``v4``.
        """
        v1, v2, v3, v4, v5, v6 = self.v_break
        nv2 = v3 - (v3 - v2) / factor
        nv5 = v4 + (v5 - v4) / factor
        return QVCurve((min(v1, nv2), nv2, v3, v4, nv5, max(v6, nv5)), self.q_max)


def validate_breakpoints(v: Sequence[float]) -> None:
    if len(v) != 6:
        raise InvalidCurve(f"a Q-V curve needs 6 breakpoints, got {len(v)}")
    if not all(math.isfinite(x) for x in v):
        raise InvalidCurve("breakpoints must be finite")
    v1, v2, v3, v4, v5, v6 = v
    if not (v1 <= v2 < v3 <= v4 < v5 <= v6):
        raise InvalidCurve(f"breakpoints must satisfy v1<=v2<v3<=v4<v5<=v6, got {tuple(v)}")


class QVPoint(NamedTuple):
    q: float
    clamped: bool


def q_of_v(curve: QVCurve, vm: float) -> QVPoint:
    """Evaluate the droop curve at ``vm``; ``clamped`` flags an out-of-domain input."""
    vm = float(vm)
    clamped = vm < curve.v_break[0] or vm > curve.v_break[5]
    return QVPoint(float(curve.q(vm)), clamped)


def q_max_from_pf(pf_min: float, p_rated: float) -> float:
    """Reactive capability of an inverter that reaches ``pf_min`` at rated power.

    The power factor is taken as the decimal it was written as, so
    ``1/pf**2 - 1`` is formed exactly and perfect squares (pf 0.8 gives
    9/16) come out exact; otherwise the result is within an ulp or so.
    """
    if not 0.0 < pf_min < 1.0:
        raise DomainError(f"pf_min must lie in (0, 1), got {pf_min}")
    pf = Fraction(repr(float(pf_min)))
    r = 1 / pf ** 2 - 1
    n, d = r.numerator, r.denominator
    rn, rd = math.isqrt(n), math.isqrt(d)
    root = rn / rd if rn * rn == n and rd * rd == d else math.sqrt(n / d)
    return root * p_rated


def s_rating(q_max: float, p_rated: float) -> float:
    return math.hypot(q_max, p_rated)


@dataclass(frozen=True)
class CurveEncoding:
    """Indices of the variables and rows emitted by :func:`encode`."""
    delta: tuple[int, ...]                     # one binary per segment
    lam: tuple[tuple[int, int], ...]           # endpoint weights per segment
    rows: tuple[int, ...]


def encode(instance, curve: QVCurve, vm_var: int, q_var: int, prefix: str = "qv") -> CurveEncoding:
    """Append the disaggregated convex-combination block tying ``q_var`` to ``vm_var``.

    Segment ``j`` owns binary ``delta_j`` and two weights ``lam_j_a``/``lam_j_b``
    on its endpoints; exactly one segment is selected and the selected
    weights interpolate both voltage and reactive power.  Every feasible
    point satisfies ``q == curve.q(vm)`` for ``vm`` in ``[v1, v6]``.
    """
    validate_breakpoints(curve.v_break)
    v, q = curve.v_break, curve.q_break
    vm_lo = instance.variables[vm_var].lb
    vm_hi = instance.variables[vm_var].ub
    deltas, lams, rows = [], [], []
    for j in range(N_SEGMENTS):
        # a segment outside the bounds of vm can never be selected
        ub = 0.0 if v[j + 1] < vm_lo or v[j] > vm_hi else 1.0
        deltas.append(instance.add_var(f"{prefix}_delta{j + 1}", 0.0, ub, binary=True))
        lams.append((instance.add_var(f"{prefix}_lam{j + 1}_{j + 1}", 0.0, ub),
                     instance.add_var(f"{prefix}_lam{j + 1}_{j + 2}", 0.0, ub)))

    vm_row = {vm_var: 1.0}
    q_row = {q_var: 1.0}
    for j, (a, b) in enumerate(lams):
        vm_row[a] = -v[j]
        vm_row[b] = -v[j + 1]
        q_row[a] = -q[j]
        q_row[b] = -q[j + 1]
    rows.append(instance.add_row(f"{prefix}_vm", vm_row, "=", 0.0))
    rows.append(instance.add_row(f"{prefix}_q", q_row, "=", 0.0))
    for j, (a, b) in enumerate(lams):
        rows.append(instance.add_row(f"{prefix}_seg{j + 1}",
                                     {deltas[j]: 1.0, a: -1.0, b: -1.0}, "=", 0.0))
    rows.append(instance.add_row(f"{prefix}_one", {d: 1.0 for d in deltas}, "=", 1.0))
    return CurveEncoding(tuple(deltas), tuple(lams), tuple(rows))
