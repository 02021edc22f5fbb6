import numpy as np
import pytest

from voltvar.controlsim import (InverterDynamics, run_dynamic_enable, run_quasi_static,
                                volt_var_fixed_point, worker_count, write_violation_log)
from voltvar.errors import OscillationDetected
from voltvar.powerflow import solve_nonlinear

ALL_CANDIDATES = ("PV675a", "PV675b", "PV675c", "PV652a", "PV634a", "PV646b")


def steep(feeder, ids, factor=50.0):
    return {g: feeder.pu.pv_map[g].curve.steepened(factor) for g in ids}


def test_no_inverters_is_plain_power_flow(ieee13, ieee13_scenarios):
    s = ieee13_scenarios[0]
    fp = volt_var_fixed_point(ieee13, s, [])
    assert fp.setpoints == {} and fp.iterations == 1
    assert np.array_equal(fp.solution.v, solve_nonlinear(ieee13, s).v)


def test_fixed_point_is_self_consistent(ieee13, ieee13_scenarios):
    pu = ieee13.pu
    for s in ieee13_scenarios:
        fp = volt_var_fixed_point(ieee13, s, ALL_CANDIDATES)
        for g, (p, q) in fp.setpoints.items():
            unit = pu.pv_map[g]
            vm = abs(fp.solution.voltage(unit.node))
            assert q == pytest.approx(unit.curve.q(vm), abs=1e-5)


def _loop_gain(feeder, scenario, ids, curves):
    """Finite-difference sensitivity of local |V| to Q times the steepest curve slope."""
    pu = feeder.pu
    fp = volt_var_fixed_point(feeder, scenario, ids)
    idx = [feeder.network.index[pu.pv_map[g].node] for g in ids]
    q0 = np.array([fp.setpoints[g][1] for g in ids])

    def vm(q):
        sp = {g: (fp.setpoints[g][0], qq) for g, qq in zip(ids, q)}
        return np.abs(solve_nonlinear(feeder, scenario, sp).v[idx])

    h = 1e-6
    sens = np.column_stack([(vm(q0 + h * e) - vm(q0 - h * e)) / (2 * h) for e in np.eye(len(ids))])
    return np.linalg.eigvals(-np.diag([curves[g].max_slope for g in ids]) @ sens)


def test_steep_pair_oscillates(two_inverter):
    f, sc = two_inverter
    ids = ["INV1", "INV2"]
    curves = steep(f, ids)
    eig = _loop_gain(f, sc[0], ids, curves)
    # damped map Q <- (1 - a) Q + a (G Q + c), a = 0.5, leaves the unit circle
    assert np.max(np.abs(0.5 + 0.5 * eig)) > 1.0
    with pytest.raises(OscillationDetected) as err:
        volt_var_fixed_point(f, sc[0], ids, curves=curves)
    assert set(err.value.inverters) <= set(ids) and err.value.inverters
    lo, hi = err.value.envelope[err.value.inverters[0]]
    assert hi > lo


def test_nominal_pair_converges(two_inverter):
    f, sc = two_inverter
    ids = ["INV1", "INV2"]
    eig = _loop_gain(f, sc[0], ids, {g: f.pu.pv_map[g].curve for g in ids})
    assert np.max(np.abs(0.5 + 0.5 * eig)) < 1.0
    fp = volt_var_fixed_point(f, sc[0], ids)
    assert fp.setpoints["INV1"][1] < 0


def test_steep_pair_oscillates_dynamically(two_inverter):
    f, sc = two_inverter
    ids = ["INV1", "INV2"]
    with pytest.raises(OscillationDetected):
        run_dynamic_enable(f, ids, sc[0], curves=steep(f, ids))


def _var_priority_ok(unit, mpp, p, q):
    s = unit.s_rating
    assert p * p + q * q <= s * s + 1e-9
    if abs(q) <= np.sqrt(max(0.0, s * s - mpp * mpp)):
        assert p == pytest.approx(mpp, abs=1e-12)


def test_var_priority_in_fixed_point(ieee13, ieee13_scenarios):
    pu = ieee13.pu
    for s in ieee13_scenarios:
        fp = volt_var_fixed_point(ieee13, s, ALL_CANDIDATES)
        for g, (p, q) in fp.setpoints.items():
            _var_priority_ok(pu.pv_map[g], s.mpp[g] / ieee13.power_base_kw, p, q)


def test_var_priority_with_saturated_rating(two_inverter):
    f, sc = two_inverter
    unit = f.pu.pv_map["INV1"]
    fp = volt_var_fixed_point(f, sc[0], ["INV1"])
    p, q = fp.setpoints["INV1"]
    _var_priority_ok(unit, sc[0].mpp["INV1"] / f.power_base_kw, p, q)
    assert unit.p_rated > 0 and unit.s_rating > unit.p_rated


@pytest.fixture(scope="module")
def trace(ieee13, ieee13_scenarios, ieee13_plan):
    return run_dynamic_enable(ieee13, ieee13_plan, ieee13_scenarios[0])


def test_dynamic_enable_drops_and_settles(trace):
    k_on = int(np.searchsorted(trace.t, 0.04))
    assert np.allclose(trace.vm[:k_on], trace.vm[0])
    assert np.all(trace.vm[-1] < trace.vm[0])
    assert trace.settled and trace.settling_time < 0.5
    assert np.max(np.abs(trace.p[-1] - trace.p[0])) <= 1e-4


def test_dynamic_equilibrium_matches_curve(ieee13, ieee13_scenarios, ieee13_plan, trace):
    pu = ieee13.pu
    for j, g in enumerate(trace.inverters):
        node = pu.pv_map[g].node
        vm = trace.vm[-1, trace.nodes.index(node)]
        assert trace.q[-1, j] == pytest.approx(pu.pv_map[g].curve.q(vm), abs=1e-4)
    for k in range(len(trace.t)):
        for j, g in enumerate(trace.inverters):
            _var_priority_ok(pu.pv_map[g], ieee13_scenarios[0].mpp[g] / ieee13.power_base_kw,
                             trace.p[k, j], trace.q[k, j])


def test_fast_lag_matches_fixed_point(ieee13, ieee13_scenarios, ieee13_plan):
    s = ieee13_scenarios[0]
    dyn = InverterDynamics(tau=0.01, dt=0.001, t_end=0.4)
    tr = run_dynamic_enable(ieee13, ieee13_plan, s, dyn)
    fp = volt_var_fixed_point(ieee13, s, ieee13_plan)
    assert tr.settled
    for j, g in enumerate(tr.inverters):
        assert tr.q[-1, j] == pytest.approx(fp.setpoints[g][1], abs=1e-4)
    assert np.max(np.abs(tr.vm[-1] - np.abs([fp.solution.voltage(n) for n in tr.nodes]))) <= 1e-4


def test_control_never_raises_local_voltage(ieee13, ieee13_scenarios):
    s = ieee13_scenarios[0]
    base = solve_nonlinear(ieee13, s)
    pu = ieee13.pu
    checked = 0
    for g in ALL_CANDIDATES:
        node = pu.pv_map[g].node
        if abs(base.voltage(node)) <= ieee13.v_max:
            continue
        fp = volt_var_fixed_point(ieee13, s, [g])
        assert abs(fp.solution.voltage(node)) <= abs(base.voltage(node)) + 1e-12
        checked += 1
    assert checked


def test_dynamics_deterministic(ieee13, ieee13_scenarios, ieee13_plan, trace):
    again = run_dynamic_enable(ieee13, ieee13_plan, ieee13_scenarios[0])
    assert np.array_equal(again.vm, trace.vm) and np.array_equal(again.q, trace.q)


def test_trace_files(tmp_path, trace):
    vpath, ppath = trace.write(tmp_path)
    assert vpath.read_text().splitlines()[0] == "t,node,Vmag"
    assert ppath.read_text().splitlines()[0] == "t,inverter,P,Q"


def test_quasi_static_day(ieee13, ieee13_day, ieee13_plan, tmp_path):
    off = run_quasi_static(ieee13, ieee13_plan, ieee13_day, control=False)
    on = run_quasi_static(ieee13, ieee13_plan, ieee13_day)
    steps = sorted({r[0] for r in off.violations})
    assert steps and all(8 <= k <= 16 for k in steps)
    assert on.violations == []
    write_violation_log(off.violations, tmp_path / "v.csv")
    rows = (tmp_path / "v.csv").read_text().splitlines()
    assert rows[0] == "step,node,phase,Vmag,bound" and len(rows) == len(off.violations) + 1
    ser = on.series(ieee13_plan.placed_ids[0])
    assert len(ser["Q"]) == 24 and min(ser["Q"]) < 0


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("VOLTVAR_THREADS", "1")
    assert worker_count(10) == 1
    monkeypatch.setenv("VOLTVAR_THREADS", "3")
    assert worker_count(10) == 3 and worker_count(2) == 2


def test_dynamics_parameters_validated():
    with pytest.raises(ValueError):
        InverterDynamics(tau=0.001, dt=0.001)
    with pytest.raises(ValueError):
        InverterDynamics(alpha=0.0)
