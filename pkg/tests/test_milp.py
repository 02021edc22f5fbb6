import itertools
import math

import numpy as np
import pytest

from voltvar.milp import (MipInstance, PiecewiseConvexTerm, add_quadratic_penalty, polygon_contains,
                          polygonize_circle, read_mps, solve_lp, solve_mip, write_mps)


def lp_from_arrays(c, a, senses, b, lb=None, ub=None, binary=()):
    inst = MipInstance("t")
    n = len(c)
    lb = [0.0] * n if lb is None else lb
    ub = [math.inf] * n if ub is None else ub
    for j in range(n):
        inst.add_var(f"x{j}", lb[j], ub[j], binary=j in binary, obj=c[j])
    for i, (row, s, rhs) in enumerate(zip(a, senses, b)):
        inst.add_row(f"r{i}", {j: v for j, v in enumerate(row)}, s, rhs)
    return inst


def test_lower_bound_row():
    inst = MipInstance()
    x = inst.add_var("x", -math.inf, math.inf, obj=1.0)
    inst.add_row("lb", {x: 1.0}, ">=", 3.0)
    res = solve_lp(inst)
    assert res.status == "optimal"
    assert res.x[0] == pytest.approx(3.0)


def test_infeasible_pair():
    inst = MipInstance()
    x = inst.add_var("x", -math.inf, math.inf, obj=1.0)
    inst.add_row("a", {x: 1.0}, "<=", 1.0)
    inst.add_row("b", {x: 1.0}, ">=", 2.0)
    assert solve_lp(inst).status == "infeasible"


def test_unbounded():
    inst = MipInstance()
    x = inst.add_var("x", 0, math.inf, obj=-1.0)
    y = inst.add_var("y", 0, math.inf)
    inst.add_row("a", {x: 1.0, y: -1.0}, "<=", 1.0)
    assert solve_lp(inst).status == "unbounded"


def test_beale_cycling_example_terminates():
    # Beale's instance cycles under textbook Dantzig pivoting; optimum -1/20 at x4=1/25, x6=1
    c = [-0.75, 150.0, -0.02, 6.0]
    a = [[0.25, -60.0, -0.04, 9.0], [0.5, -90.0, -0.02, 3.0]]
    inst = lp_from_arrays(c, a, ["<=", "<="], [0.0, 0.0], ub=[math.inf, math.inf, 1.0, math.inf])
    res = solve_lp(inst)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(-0.05, abs=1e-12)
    assert res.x == pytest.approx([0.04, 0.0, 1.0, 0.0], abs=1e-12)


def test_lp_duality_random():
    rng = np.random.default_rng(7)
    for _ in range(20):
        m, n = rng.integers(3, 9), rng.integers(3, 9)
        a = rng.uniform(-1, 2, size=(m, n))
        x0 = rng.uniform(0, 1, n)
        b = a @ x0 - rng.uniform(0, 1, m)
        c = rng.uniform(0.1, 2, n) + np.abs(a).sum(axis=0)
        primal = solve_lp(lp_from_arrays(c, a, [">="] * m, b))
        dual = solve_lp(lp_from_arrays(-b, a.T, ["<="] * n, c))
        assert primal.status == dual.status == "optimal"
        assert primal.objective == pytest.approx(-dual.objective, abs=1e-7)
        # row duals reported by the primal solve price the constraints
        assert b @ primal.duals == pytest.approx(primal.objective, abs=1e-7)
        assert np.all(primal.duals >= -1e-9)


def test_lp_deterministic():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(6, 9))
    inst = lp_from_arrays(rng.normal(size=9), a, ["<="] * 6, np.abs(rng.normal(size=6)),
                          lb=[-1.0] * 9, ub=[1.0] * 9)
    r1, r2 = solve_lp(inst), solve_lp(inst)
    assert r1.x.tobytes() == r2.x.tobytes()


def knapsack(values, weights, cap):
    inst = MipInstance("knap")
    for j, v in enumerate(values):
        inst.add_var(f"b{j}", binary=True, obj=-v)
    inst.add_row("cap", {j: w for j, w in enumerate(weights)}, "<=", cap)
    return inst


def test_knapsack_matches_enumeration():
    values = [10, 13, 7, 8, 12, 4, 9, 6]
    weights = [5, 7, 4, 4, 6, 2, 5, 3]
    cap = 17
    best = max(sum(v for v, s in zip(values, bits) if s)
               for bits in itertools.product([0, 1], repeat=8)
               if sum(w for w, s in zip(weights, bits) if s) <= cap)
    sol = solve_mip(knapsack(values, weights, cap))
    assert sol.status == "optimal"
    assert -sol.objective == pytest.approx(best)
    assert sum(w * x for w, x in zip(weights, sol.x)) <= cap + 1e-9


def test_fixed_binaries_match_lp():
    inst = knapsack([3, 5, 4], [2, 3, 2], 4)
    for j, val in enumerate([1, 0, 1]):
        inst.set_bounds(j, val, val)
    sol = solve_mip(inst)
    assert sol.nodes == 1
    assert sol.objective == pytest.approx(solve_lp(inst).objective)


def test_integer_infeasible_with_feasible_relaxation():
    inst = MipInstance()
    a = inst.add_var("a", binary=True)
    b = inst.add_var("b", binary=True)
    inst.add_row("half", {a: 1.0, b: 1.0}, "=", 1.5)
    assert solve_lp(inst).status == "optimal"
    assert solve_mip(inst).status == "infeasible"


def test_mip_solution_satisfies_rows():
    inst = knapsack([10, 13, 7, 8, 12], [5, 7, 4, 4, 6], 13)
    sol = solve_mip(inst)
    assert inst.max_violation(sol.x) <= 1e-7
    assert all(abs(sol.x[j] - round(sol.x[j])) <= 1e-6 for j in inst.binaries)


def test_penalty_value_at_knot():
    inst = MipInstance()
    x = inst.add_var("x", -1.0, 1.0)
    inst.add_row("fix", {x: 1.0}, "=", 0.5)
    add_quadratic_penalty(inst, PiecewiseConvexTerm(x, 0.0, 1.0, 1.0, segments=4))
    res = solve_lp(inst)
    assert res.objective == pytest.approx(0.25, abs=1e-12)


def test_penalty_zero_at_center():
    inst = MipInstance()
    x = inst.add_var("x", -1.0, 1.0)
    inst.add_row("fix", {x: 1.0}, "=", 0.3)
    add_quadratic_penalty(inst, PiecewiseConvexTerm(x, 0.3, 2.0, 1.0, segments=4))
    assert solve_lp(inst).objective == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("w,c,h,k", [(1.0, 0.0, 1.0, 4), (1e4, 1.0, 0.05, 4), (1e3, 0.2, 1.0, 16)])
def test_penalty_error_bound_dense_grid(w, c, h, k):
    term = PiecewiseConvexTerm(0, c, w, h, segments=k)
    xs = np.linspace(c - h, c + h, 20001)
    err = term.evaluate(xs) - w * (xs - c) ** 2
    assert err.min() >= -1e-12 * w
    assert err.max() <= term.error_bound * (1 + 1e-12)
    if (w, c, h, k) == (1.0, 0.0, 1.0, 4):
        assert term.error_bound == pytest.approx(1 / 64)


def test_penalty_slopes_increasing():
    slopes = [s for s, *_ in PiecewiseConvexTerm(0, 0.0, 1.0, 1.0, 5).secants()]
    assert np.all(np.diff(slopes) > 0)


def test_polygon_vertex_and_apothem():
    s, n = 1.25, 8
    rows = polygonize_circle(s, n)
    assert polygon_contains(rows, s, 0.0, tol=1e-12)
    apothem = s * math.cos(math.pi / n)
    phi = math.pi / n
    assert polygon_contains(rows, apothem * math.cos(phi), apothem * math.sin(phi), tol=1e-12)
    r = apothem + 1e-6
    assert not polygon_contains(rows, r * math.cos(phi), r * math.sin(phi))


def test_polygon_inside_circle_random():
    s = 1.25
    rows = polygonize_circle(s, 64)
    rng = np.random.default_rng(11)
    p, q = rng.uniform(-s, s, size=(2, 1_000_000))
    inside = polygon_contains(rows, p, q)
    assert inside.sum() > 700_000
    assert np.all(p[inside] ** 2 + q[inside] ** 2 <= s * s * (1 + 1e-12))


def test_mps_round_trip():
    inst = knapsack([10, 13, 7], [5, 7, 4], 9)
    y = inst.add_var("y", -2.0, 3.5, obj=0.25)
    z = inst.add_var("z", -math.inf, math.inf)
    inst.add_row("link", {y: 1.0, z: -1.0, 0: 2.0}, "=", 0.5)
    inst.add_row("g", {z: 1.0}, ">=", -4.0)
    inst.obj_constant = 1.5
    text = write_mps(inst)
    back = read_mps(text)
    assert write_mps(back) == text
    a, b = solve_mip(inst), solve_mip(back)
    assert a.objective == pytest.approx(b.objective)
