"""Mixed-integer linear program container."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import ModelAssemblyError

INF = math.inf
SENSES = ("<=", ">=", "=")


@dataclass
class Variable:
    name: str
    lb: float = 0.0
    ub: float = INF
    binary: bool = False
    obj: float = 0.0
    priority: int = 0  # branching class; higher classes are branched on first
    direction: int = 0  # child explored first: +1 up, -1 down, 0 the rounding side


@dataclass
class Row:
    name: str
    coefs: dict[int, float]
    sense: str
    rhs: float


@dataclass(frozen=True)
class PiecewiseConvexTerm:
    """``weight * (x - center)**2`` on ``[center - half_width, center + half_width]``.

    The interval is split into ``segments`` pieces on each side of the
    center, so knots sit every ``half_width / segments``.
    """
    var: int
    center: float
    weight: float
    half_width: float
    segments: int = 16
    epigraph: int | None = None  # variable carrying the approximation, set when appended
    label: str = ""

    def __post_init__(self):
        if self.segments < 2:
            raise ValueError("a piecewise term needs at least 2 segments per side")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")

    def knots(self) -> np.ndarray:
        k = np.arange(-self.segments, self.segments + 1)
        return self.center + self.half_width * k / self.segments

    def secants(self):
        """``(slope, intercept, left, right)`` for every secant piece."""
        t = self.knots()
        f = self.weight * (t - self.center) ** 2
        out = []
        for a, b, fa, fb in zip(t[:-1], t[1:], f[:-1], f[1:]):
            slope = (fb - fa) / (b - a)
            out.append((slope, fa - slope * a, a, b))
        return out

    def evaluate(self, x):
        """Value of the max-of-secants approximation at ``x``."""
        x = np.asarray(x, dtype=float)
        return np.max([s * x + c for s, c, _, _ in self.secants()], axis=0)

    @property
    def error_bound(self) -> float:
        return self.weight * (self.half_width / self.segments) ** 2 / 4.0


@dataclass
class StandardForm:
    """Array view: ``row_lo <= A x <= row_hi``, ``col_lo <= x <= col_hi``, min ``c x``."""
    a: sp.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    col_lo: np.ndarray
    col_hi: np.ndarray
    c: np.ndarray
    c0: float
    integer: np.ndarray
    priority: np.ndarray | None = None
    direction: np.ndarray | None = None

    @property
    def shape(self):
        return self.a.shape


@dataclass
class MipInstance:
    name: str = "model"
    variables: list[Variable] = field(default_factory=list)
    rows: list[Row] = field(default_factory=list)
    obj_constant: float = 0.0
    penalties: list[PiecewiseConvexTerm] = field(default_factory=list)

    def __post_init__(self):
        self._vindex = {v.name: i for i, v in enumerate(self.variables)}
        self._rindex = {r.name: i for i, r in enumerate(self.rows)}

    # -- building ------------------------------------------------------------

    def add_var(self, name: str, lb: float = 0.0, ub: float = INF, binary: bool = False,
                obj: float = 0.0, priority: int = 0, direction: int = 0) -> int:
        if name in self._vindex:
            raise ModelAssemblyError("variables", f"duplicate variable {name}")
        if binary:
            lb, ub = max(0.0, lb), min(1.0, ub)
        if math.isnan(lb) or math.isnan(ub) or lb > ub or lb == INF or ub == -INF:
            raise ModelAssemblyError("variables", f"{name}: invalid bounds [{lb}, {ub}]")
        if not math.isfinite(obj):
            raise ModelAssemblyError("objective", f"{name}: non-finite cost {obj}")
        self._vindex[name] = len(self.variables)
        self.variables.append(Variable(name, float(lb), float(ub), binary, float(obj), int(priority),
                                       int(direction)))
        return len(self.variables) - 1

    def add_row(self, name: str, coefs: dict[int, float], sense: str, rhs: float) -> int:
        if sense == "==":
            sense = "="
        if sense not in SENSES:
            raise ModelAssemblyError(name, f"unknown sense {sense!r}")
        if name in self._rindex:
            raise ModelAssemblyError(name, f"duplicate row {name}")
        clean = {}
        nvar = len(self.variables)
        for j, a in coefs.items():
            if not 0 <= j < nvar:
                raise ModelAssemblyError(name, f"unknown variable index {j}")
            if not math.isfinite(a):
                raise ModelAssemblyError(name, f"non-finite coefficient on {self.variables[j].name}")
            if a != 0.0:
                clean[j] = clean.get(j, 0.0) + float(a)
        if not math.isfinite(rhs):
            raise ModelAssemblyError(name, "non-finite right-hand side")
        self._rindex[name] = len(self.rows)
        self.rows.append(Row(name, clean, sense, float(rhs)))
        return len(self.rows) - 1

    def set_obj(self, var: int, cost: float) -> None:
        self.variables[var].obj = float(cost)

    def set_bounds(self, var: int, lb: float, ub: float) -> None:
        v = self.variables[var]
        v.lb, v.ub = float(lb), float(ub)

    def var(self, name: str) -> int:
        return self._vindex[name]

    def row(self, name: str) -> int:
        return self._rindex[name]

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def binaries(self) -> list[int]:
        return [i for i, v in enumerate(self.variables) if v.binary]

    def relaxed(self) -> "MipInstance":
        out = MipInstance(self.name, [Variable(v.name, v.lb, v.ub, False, v.obj, v.priority, v.direction) for v in self.variables],
                          list(self.rows), self.obj_constant, list(self.penalties))
        return out

    # -- inspection ----------------------------------------------------------

    def compile(self) -> StandardForm:
        m, n = self.n_rows, self.n_vars
        indptr = [0]
        indices: list[int] = []
        data: list[float] = []
        lo = np.empty(m)
        hi = np.empty(m)
        for i, r in enumerate(self.rows):
            keys = sorted(r.coefs)
            indices.extend(keys)
            data.extend(r.coefs[k] for k in keys)
            indptr.append(len(indices))
            lo[i] = r.rhs if r.sense in (">=", "=") else -INF
            hi[i] = r.rhs if r.sense in ("<=", "=") else INF
        a = sp.csr_matrix((np.array(data, dtype=float), np.array(indices, dtype=np.int64),
                           np.array(indptr, dtype=np.int64)), shape=(m, n))
        return StandardForm(
            a=a, row_lo=lo, row_hi=hi,
            col_lo=np.array([v.lb for v in self.variables], dtype=float),
            col_hi=np.array([v.ub for v in self.variables], dtype=float),
            c=np.array([v.obj for v in self.variables], dtype=float),
            c0=self.obj_constant,
            integer=np.array([v.binary for v in self.variables], dtype=bool),
            priority=np.array([v.priority for v in self.variables], dtype=np.int64),
            direction=np.array([v.direction for v in self.variables], dtype=np.int64))

    def objective_value(self, x) -> float:
        return self.obj_constant + sum(v.obj * x[i] for i, v in enumerate(self.variables) if v.obj)

    def row_activity(self, x) -> np.ndarray:
        return self.compile().a @ np.asarray(x, dtype=float)

    def max_violation(self, x) -> float:
        """Largest bound or row violation of ``x``."""
        x = np.asarray(x, dtype=float)
        f = self.compile()
        act = f.a @ x if self.n_rows else np.zeros(0)
        viol = [0.0]
        if self.n_rows:
            viol.append(float(np.max(np.maximum(f.row_lo - act, act - f.row_hi))))
        viol.append(float(np.max(np.maximum(f.col_lo - x, x - f.col_hi))) if self.n_vars else 0.0)
        return max(viol)
