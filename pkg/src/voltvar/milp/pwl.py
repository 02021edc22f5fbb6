"""Linear stand-ins for the two nonlinear pieces of the planning model."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .instance import INF, MipInstance, PiecewiseConvexTerm


def add_quadratic_penalty(instance: MipInstance, term: PiecewiseConvexTerm,
                          name: str | None = None) -> int:
    """Append the epigraph of ``term`` and return the epigraph variable.

    The epigraph ``e`` enters the objective with cost 1 (the weight lives
    in the secants) and is bounded below by every secant of the uniform
    knot grid.  Secants whose segment lies entirely outside the bounds of
    the approximated variable can never be the active piece and are
    skipped.
    """
    v = instance.variables[term.var]
    name = name or f"pen_{v.name}"
    e = instance.add_var(name, 0.0, INF, obj=1.0)
    secs = term.secants()
    for k, (slope, icpt, left, right) in enumerate(secs):
        first, last = k == 0, k == len(secs) - 1
        if (right <= v.lb and not first) or (left >= v.ub and not last):
            continue
        instance.add_row(f"{name}_s{k}", {e: 1.0, term.var: -slope}, ">=", icpt)
    instance.penalties.append(dataclasses.replace(term, epigraph=e, label=term.label or name))
    return e


def polygonize_circle(s_rating: float, n_sides: int = 32):
    """Rows ``(a_p, a_q, rhs)`` with ``a_p P + a_q Q <= rhs`` of the inscribed regular polygon.

    Vertices sit on the circle at angles ``2*pi*k/n``, so the polygon is an
    inner approximation whose apothem is ``s*cos(pi/n)``.
    """
    if n_sides < 8:
        raise ValueError("n_sides must be at least 8")
    if not s_rating > 0:
        raise ValueError("s_rating must be positive")
    apothem = s_rating * math.cos(math.pi / n_sides)
    out = []
    for k in range(n_sides):
        phi = (2 * k + 1) * math.pi / n_sides
        out.append((math.cos(phi), math.sin(phi), apothem))
    return out


def polygon_contains(rows, p, q, tol: float = 0.0) -> np.ndarray:
    """Vectorised membership test for points against :func:`polygonize_circle` rows."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    ok = np.ones(np.broadcast(p, q).shape, dtype=bool)
    for a, b, r in rows:
        ok &= a * p + b * q <= r + tol
    return ok


def binding_facets(rows, p_box: tuple[float, float], q_box: tuple[float, float]):
    """Facets that cut the box ``p_box x q_box``; the others are implied by bounds."""
    corners = [(p, q) for p in p_box for q in q_box]
    return [(a, b, r) for a, b, r in rows if max(a * p + b * q for p, q in corners) > r]
