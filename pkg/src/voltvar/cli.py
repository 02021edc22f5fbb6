"""Command-line front end: validate, plan, verify, simulate, dynamics.

Exit codes: 0 ok, 1 verification failed, 2 bad input, 3 bad scenario set,
4 stability failure, 5 solver failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, svg
from .controlsim import (InverterDynamics, run_dynamic_enable, run_quasi_static,
                         write_violation_log)
from .errors import (DegeneratePoint, Divergence, InfeasiblePlacement, ModelAssemblyError,
                     NoIncumbent, NonConvergence, NumericalFailure, OscillationDetected,
                     ParseError, ScenarioError, SingularNetwork, UnitError, ValidationError,
                     VoltVarError)
from .feeder import load_feeder, load_scenarios, load_timeseries, validate_scenarios
from .planner import (OuterLoopStall, PlannerConfig, base_case, load_plan, read_operating_points,
                      solve_placement, verify_plan, voltage_violations, write_plan)

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_SCENARIO, EXIT_STABILITY, EXIT_SOLVER = 0, 1, 2, 3, 4, 5
DESTABILIZE_FACTOR = 50.0
P_RECOVERY_TOL = 1e-4  # pu


class _ScenarioInputError(VoltVarError):
    """Wraps any failure while reading the scenario or time-series file."""


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ScenarioError, _ScenarioInputError)):
        return EXIT_SCENARIO
    if isinstance(exc, (OscillationDetected, Divergence)):
        return EXIT_STABILITY
    if isinstance(exc, (InfeasiblePlacement, NoIncumbent, NumericalFailure, NonConvergence,
                        SingularNetwork, DegeneratePoint)):
        return EXIT_SOLVER
    if isinstance(exc, (ParseError, ValidationError, UnitError, ModelAssemblyError, OSError)):
        return EXIT_INPUT
    return EXIT_SOLVER


# -- manifest ---------------------------------------------------------------

def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def inputs_hash(files: dict[str, str]) -> str:
    h = hashlib.sha256()
    for role in sorted(files):
        h.update(f"{role}\0{file_sha256(files[role])}\n".encode())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, files: dict[str, str], overrides: dict) -> Path:
    """Record inputs, overrides and a content hash; the timestamp honours SOURCE_DATE_EPOCH."""
    stamp = int(os.environ.get("SOURCE_DATE_EPOCH", int(time.time())))
    data = {
        "command": command,
        "inputs": {role: {"path": str(p), "sha256": file_sha256(p)} for role, p in sorted(files.items())},
        "overrides": overrides,
        "version": __version__,
        "inputs_sha256": inputs_hash(files),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(stamp)),
    }
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def check_manifest(path) -> bool:
    """True when the recorded input hash still matches the files on disk."""
    data = json.loads(Path(path).read_text())
    files = {role: rec["path"] for role, rec in data["inputs"].items()}
    try:
        return inputs_hash(files) == data["inputs_sha256"]
    except OSError:
        return False


# -- loading ----------------------------------------------------------------

def _scenarios(path, feeder):
    try:
        return validate_scenarios(load_scenarios(path, feeder), feeder)
    except ScenarioError:
        raise
    except (ParseError, ValidationError) as exc:
        raise _ScenarioInputError(str(exc)) from None


def _timeseries(path, feeder):
    try:
        return load_timeseries(path, feeder)
    except ScenarioError:
        raise
    except (ParseError, ValidationError) as exc:
        raise _ScenarioInputError(str(exc)) from None


def _plan(path):
    plan = load_plan(path)
    return read_operating_points(plan, Path(path).parent)


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


# -- commands ---------------------------------------------------------------

def cmd_validate(args) -> int:
    feeder = load_feeder(args.feeder)
    c = feeder.counts()
    print(f"feeder {feeder.name}: {c['buses']} buses, {c['node_phases']} node-phases, "
          f"{c['pv']} PV units ({c['candidates']} candidates)")
    files = {"feeder": args.feeder}
    if args.scenarios:
        scenarios = _scenarios(args.scenarios, feeder)
        files["scenarios"] = args.scenarios
        sols = base_case(feeder, scenarios)
        for s in scenarios:
            n = len(voltage_violations(feeder, s.id, sols[s.id]))
            print(f"scenario {s.id}: probability {s.probability:.4g}, penetration "
                  f"{100 * s.penetration:.1f}%, {n} base-case violations")
    if args.timeseries:
        ts = _timeseries(args.timeseries, feeder)
        files["timeseries"] = args.timeseries
        print(f"time series: {len(ts.steps)} steps")
    if args.out_dir:
        write_manifest(_out_dir(args), "validate", files, {})
    print("OK")
    return EXIT_OK


PLAN_FLAGS = ("wc", "wo", "wv", "mip_gap", "max_outer", "eps_lin", "aggregate_by_bus")


def _config(args) -> PlannerConfig:
    kw = {}
    for flag, field in (("wc", "w_c"), ("wo", "w_o"), ("wv", "w_v"), ("mip_gap", "mip_gap"),
                        ("max_outer", "max_outer"), ("eps_lin", "eps_lin")):
        if getattr(args, flag) is not None:
            kw[field] = getattr(args, flag)
    if args.aggregate_by_bus:
        kw["aggregate_by_bus"] = True
    try:
        return PlannerConfig(**kw)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def cmd_plan(args) -> int:
    feeder = load_feeder(args.feeder)
    scenarios = _scenarios(args.scenarios, feeder)
    config = _config(args)
    out = _out_dir(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", OuterLoopStall)
        try:
            plan = solve_placement(feeder, scenarios, config)
        except InfeasiblePlacement:
            sols = base_case(feeder, scenarios)
            rows = []
            for s in scenarios:
                rows += voltage_violations(feeder, s.id, sols[s.id])
            _write_violations(rows, out / "violations.csv")
            for sid, bus, ph, vm, side in rows:
                print(f"violation {sid} {bus}.{ph} {vm:.4f} ({side})", file=sys.stderr)
            raise
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_plan(plan, out)
    svg.feeder_map(feeder, out / "feeder_map.svg", plan.placed_ids,
                   f"{feeder.name}: {plan.summary_text()}")
    write_manifest(out, "plan", {"feeder": args.feeder, "scenarios": args.scenarios},
                   _overrides(args, PLAN_FLAGS))
    obj = plan.objective
    print(plan.summary_text())
    print(f"objective {obj['total']:.6f} (placement {obj['placement']:.0f}, curtailment "
          f"{obj['curtailment']:.3g}, feeder head {obj['feeder_head']:.3g}); "
          f"{plan.outer_iterations} outer iteration(s)")
    return EXIT_OK


def _write_violations(rows, path) -> None:
    lines = ["scenario,node,phase,Vmag,bound"]
    lines += [f"{sid},{b},{p},{v:.6f},{side}" for sid, b, p, v, side in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_verify(args) -> int:
    feeder = load_feeder(args.feeder)
    scenarios = _scenarios(args.scenarios, feeder)
    plan = _plan(args.plan)
    out = _out_dir(args)
    rep = verify_plan(feeder, scenarios, plan)
    lines = rep.lines()
    (out / "verify_report.txt").write_text("\n".join(lines) + "\n")
    _write_violations(rep.violations, out / "violations.csv")
    rows = ["scenario,inverter,Q_plan_pu,Q_sim_pu"]
    qp, qs = [], []
    for sid in rep.q_sim:
        for g, q in rep.q_sim[sid].items():
            rows.append(f"{sid},{g},{rep.q_plan[sid][g]:.10f},{q:.10f}")
            qp.append(rep.q_plan[sid][g])
            qs.append(q)
    (out / "q_compare.csv").write_text("\n".join(rows) + "\n")
    svg.scatter(qp, qs, out / "q_scatter.svg", "Reactive power: plan vs simulation",
                "Q plan (pu)", "Q simulated (pu)")
    dv = [(sid, n, float(d)) for sid, arr in rep.dv.items() for n, d in zip(plan.nodes, arr)]
    rows = ["scenario,node,phase,dV_pu"] + [f"{sid},{n.bus},{n.phase},{d:.10f}" for sid, n, d in dv]
    (out / "voltage_diff.csv").write_text("\n".join(rows) + "\n")
    svg.histogram([d for _, _, d in dv], out / "voltage_diff.svg",
                  "Voltage difference: simulation minus plan", "dV (pu)")
    write_manifest(out, "verify", {"feeder": args.feeder, "scenarios": args.scenarios,
                                   "plan": args.plan}, {})
    print("\n".join(lines))
    return EXIT_OK if rep.passed else EXIT_VERIFY


def cmd_simulate(args) -> int:
    feeder = load_feeder(args.feeder)
    ts = _timeseries(args.timeseries, feeder)
    plan = _plan(args.plan) if args.plan else None
    out = _out_dir(args)
    off = run_quasi_static(feeder, plan, ts, control=False)
    on = run_quasi_static(feeder, plan, ts, control=True)
    write_violation_log(off.violations, out / "violations_nocontrol.csv")
    write_violation_log(on.violations, out / "violations.csv")
    placed = list(plan.placed_ids) if plan else []
    rows = ["step,inverter,P_pu,Q_pu,Vmag_pu"]
    for g in placed:
        ser = on.series(g)
        rows += [f"{k},{g},{p:.10f},{q:.10f},{v:.10f}"
                 for k, (p, q, v) in enumerate(zip(ser["P"], ser["Q"], ser["V"]))]
    (out / "series.csv").write_text("\n".join(rows) + "\n")
    steps = np.arange(len(ts.steps)) * ts.step_minutes / 60.0
    vmax = {"no control": [float(r.solution.vm.max()) for r in off.results],
            "with plan": [float(r.solution.vm.max()) for r in on.results]}
    vmin = {"no control": [float(r.solution.vm.min()) for r in off.results],
            "with plan": [float(r.solution.vm.min()) for r in on.results]}
    series = {f"max |V| {k}": (steps, v) for k, v in vmax.items()}
    series.update({f"min |V| {k}": (steps, v) for k, v in vmin.items()})
    svg.line_chart(series, out / "series_voltage.svg", "Voltage envelope over the day", "hour",
                   "|V| (pu)", (feeder.v_min, feeder.v_max))
    if placed:
        svg.line_chart({g: (steps, on.series(g)["Q"]) for g in placed}, out / "series_q.svg",
                       "Smart inverter reactive power", "hour", "Q (pu)")
    files = {"feeder": args.feeder, "timeseries": args.timeseries}
    if args.plan:
        files["plan"] = args.plan
    write_manifest(out, "simulate", files, {})
    hot = sorted({k for k, *_ in off.violations})
    print(f"no control: {len(off.violations)} violations in {len(hot)} steps"
          + (f" ({', '.join(map(str, hot))})" if hot else ""))
    print(f"with plan: {len(on.violations)} violations")
    return EXIT_OK if not on.violations else EXIT_VERIFY


DYN_FLAGS = ("tau", "dt", "t_on", "t_end", "destabilize")


def cmd_dynamics(args) -> int:
    feeder = load_feeder(args.feeder)
    scenarios = _scenarios(args.scenarios, feeder)
    plan = _plan(args.plan)
    if args.scenario:
        match = [s for s in scenarios if s.id == args.scenario]
        if not match:
            raise ScenarioError(f"unknown scenario {args.scenario}", args.scenario)
        scenario = match[0]
    else:
        scenario = scenarios[0]
    kw = {k: getattr(args, k) for k in ("tau", "dt", "t_on", "t_end") if getattr(args, k) is not None}
    try:
        dyn = InverterDynamics(**kw)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out = _out_dir(args)
    curves = None
    if args.destabilize:
        pu = feeder.pu
        curves = {g: pu.pv_map[g].curve.steepened(args.destabilize) for g in plan.placed_ids}
    files = {"feeder": args.feeder, "scenarios": args.scenarios, "plan": args.plan}
    write_manifest(out, "dynamics", files, _overrides(args, DYN_FLAGS + ("scenario",)))
    trace = run_dynamic_enable(feeder, plan, scenario, dyn, curves=curves)
    trace.write(out)
    svg.line_chart({str(n): (trace.t, trace.vm[:, j]) for j, n in enumerate(trace.nodes)},
                   out / "dynamics_v.svg", f"Voltage after enabling control at {dyn.t_on} s",
                   "t (s)", "|V| (pu)", (feeder.v_max,))
    svg.line_chart({g: (trace.t, trace.q[:, j]) for j, g in enumerate(trace.inverters)},
                   out / "dynamics_q.svg", "Reactive power after enabling control", "t (s)", "Q (pu)")
    dp = float(np.max(np.abs(trace.p[-1] - trace.p[0]), initial=0.0))
    before = float(trace.vm[0].max()) if trace.vm.size else float("nan")
    after = float(trace.vm[-1].max()) if trace.vm.size else float("nan")
    ok = trace.settled and dp <= P_RECOVERY_TOL
    lines = [f"{'PASS' if trace.settled else 'FAIL'} settling: "
             + (f"{trace.settling_time:.4f} s after enable" if trace.settled else "not settled"),
             f"{'PASS' if dp <= P_RECOVERY_TOL else 'FAIL'} active power: max |dP| {dp:.3e} pu",
             f"monitored max |V|: {before:.5f} -> {after:.5f} pu"]
    (out / "dynamics_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_STABILITY


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voltvar", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, scenarios=True, plan=False, out=True):
        p.add_argument("--feeder", required=True)
        if scenarios:
            p.add_argument("--scenarios", required=True)
        if plan:
            p.add_argument("--plan", required=True)
        if out:
            p.add_argument("--out-dir", default="out")
        p.add_argument("--seed", type=int, default=None, help="recorded only; runs are deterministic")

    p = sub.add_parser("validate", help="check feeder, scenario and time-series files")
    common(p, scenarios=False, out=False)
    p.add_argument("--scenarios")
    p.add_argument("--timeseries")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", help="choose smart inverter locations")
    common(p)
    p.add_argument("--wc", type=float, help="placement cost")
    p.add_argument("--wo", type=float, help="curtailment weight (per kW squared)")
    p.add_argument("--wv", type=float, help="feeder-head deviation weight")
    p.add_argument("--mip-gap", type=float)
    p.add_argument("--max-outer", type=int)
    p.add_argument("--eps-lin", type=float)
    p.add_argument("--aggregate-by-bus", action="store_true")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("verify", help="replay a plan through the Volt-VAr fixed point")
    common(p, plan=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="quasi-static time series with and without control")
    common(p, scenarios=False)
    p.add_argument("--plan")
    p.add_argument("--timeseries", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("dynamics", help="time-domain response to enabling control")
    common(p, plan=True)
    p.add_argument("--scenario", help="scenario id (default: first)")
    p.add_argument("--tau", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--t-on", type=float)
    p.add_argument("--t-end", type=float)
    p.add_argument("--destabilize", type=float, nargs="?", const=DESTABILIZE_FACTOR, default=None,
                   metavar="FACTOR", help=f"steepen every curve (default x{DESTABILIZE_FACTOR:g})")
    p.set_defaults(func=cmd_dynamics)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (VoltVarError, OSError) as exc:
        code = exit_code(exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
