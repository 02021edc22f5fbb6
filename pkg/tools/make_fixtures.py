"""Regenerate the bundled fixture files under src/voltvar/data.

Run from the repository root:  python3 tools/make_fixtures.py

The element counts written to ``ieee13_manifest.json`` are tallied here
from the raw tables below, not through the package, so the parser can be
checked against them.
"""

from __future__ import annotations

import cmath
import json
import math
from pathlib import Path

from voltvar.feeder import (Bus, Feeder, LineSegment, Load, PhaseNodeId, PVUnit, Scenario,
                            TimeSeriesInput, Transformer, dump_conditions, dump_feeder,
                            dump_timeseries)
from voltvar.qvcurve import DEFAULT_BREAKPOINTS

DATA = Path(__file__).resolve().parents[1] / "src" / "voltvar" / "data"
MILE_FT = 5280.0

# -- 13-bus unbalanced feeder ----------------------------------------------
# Phase-impedance configurations in ohm/mile and microsiemens/mile.
CONFIGS = {
    "601": ("ABC",
            [[0.3465, 0.1560, 0.1580], [0.1560, 0.3375, 0.1535], [0.1580, 0.1535, 0.3414]],
            [[1.0179, 0.5017, 0.4236], [0.5017, 1.0478, 0.3849], [0.4236, 0.3849, 1.0348]],
            [[6.2998, -1.9958, -1.2595], [-1.9958, 5.9597, -0.7417], [-1.2595, -0.7417, 5.6386]]),
    "603": ("BC",
            [[1.3294, 0.2066], [0.2066, 1.3238]],
            [[1.3471, 0.4591], [0.4591, 1.3569]],
            [[4.7097, -0.8999], [-0.8999, 4.6658]]),
    "604": ("AC",
            [[1.3238, 0.2066], [0.2066, 1.3294]],
            [[1.3569, 0.4591], [0.4591, 1.3471]],
            [[4.6658, -0.8999], [-0.8999, 4.7097]]),
    "605": ("C", [[1.3292]], [[1.3475]], [[4.5193]]),
    "606": ("ABC",
            [[0.7982, 0.3192, 0.2849], [0.3192, 0.7891, 0.3192], [0.2849, 0.3192, 0.7982]],
            [[0.4463, 0.0328, -0.0143], [0.0328, 0.4041, 0.0328], [-0.0143, 0.0328, 0.4463]],
            [[96.8897, 0.0, 0.0], [0.0, 96.8897, 0.0], [0.0, 0.0, 96.8897]]),
    "607": ("A", [[1.3425]], [[0.5124]], [[88.9912]]),
}

# id, phases, x, y
BUSES13 = [
    ("650", "ABC", 0.0, 0.0), ("632", "ABC", 0.0, -2.0), ("633", "ABC", 1.0, -2.0),
    ("634", "ABC", 2.0, -2.0), ("645", "BC", -1.0, -2.0), ("646", "BC", -2.0, -2.0),
    ("671", "ABC", 0.0, -4.0), ("680", "ABC", 0.0, -5.0), ("684", "AC", -1.0, -4.0),
    ("611", "C", -2.0, -4.0), ("652", "A", -1.0, -5.0), ("692", "ABC", 1.0, -4.0),
    ("675", "ABC", 2.0, -4.0),
]
# id, from, to, config, length (ft)
LINES13 = [
    ("L650_632", "650", "632", "601", 2000.0), ("L632_633", "632", "633", "601", 500.0),
    ("L632_645", "632", "645", "603", 500.0), ("L645_646", "645", "646", "603", 300.0),
    ("L632_671", "632", "671", "601", 2000.0), ("L671_680", "671", "680", "601", 1000.0),
    ("L671_684", "671", "684", "604", 300.0), ("L684_611", "684", "611", "605", 300.0),
    ("L684_652", "684", "652", "607", 800.0), ("L671_692", "671", "692", "601", 50.0),
    ("L692_675", "692", "675", "606", 500.0),
]
LENGTH_SCALE = 2.0  # stretches the lines to a longer, more sensitive feeder
V_BASE_KV = 4.16
S_BASE_KVA = 3000.0
# 500 kVA service transformer, 1.1% + j2% on its own rating, referred to the primary
XFMR_Z = (0.011 * V_BASE_KV ** 2 * 1000 / 500.0, 0.02 * V_BASE_KV ** 2 * 1000 / 500.0)
XFMR_LOSS_KW = 0.8

# nominal spot loads: id, bus, phase, kW, kVAr
LOADS13 = [
    ("D634a", "634", "A", 160.0, 110.0), ("D634b", "634", "B", 120.0, 90.0),
    ("D634c", "634", "C", 120.0, 90.0), ("D645b", "645", "B", 170.0, 125.0),
    ("D646b", "646", "B", 230.0, 132.0), ("D652a", "652", "A", 128.0, 86.0),
    ("D671a", "671", "A", 385.0, 220.0), ("D671b", "671", "B", 385.0, 220.0),
    ("D671c", "671", "C", 385.0, 220.0), ("D675a", "675", "A", 485.0, 190.0),
    ("D675b", "675", "B", 68.0, 60.0), ("D675c", "675", "C", 290.0, 212.0),
    ("D692c", "692", "C", 170.0, 151.0), ("D611c", "611", "C", 170.0, 80.0),
]
# rooftop PV aggregates: id, bus, phase, p_rated kW, candidate
PV13 = [
    ("PV675a", "675", "A", 252.0, 1), ("PV675b", "675", "B", 228.0, 1),
    ("PV675c", "675", "C", 228.0, 1), ("PV652a", "652", "A", 156.0, 1),
    ("PV634a", "634", "A", 90.0, 1), ("PV646b", "646", "B", 156.0, 1),
    ("PV611c", "611", "C", 312.0, 0), ("PV634b", "634", "B", 195.0, 0),
    ("PV634c", "634", "C", 195.0, 0), ("PV671a", "671", "A", 260.0, 0),
    ("PV671b", "671", "B", 260.0, 0), ("PV671c", "671", "C", 260.0, 0),
    ("PV692c", "692", "C", 156.0, 0), ("PV645b", "645", "B", 156.0, 0),
]

OVER = dict(load=0.20, pv=0.93, head=1.04)
UNDER = dict(load=0.30, pv=0.10, head=1.00)
MILD = dict(load=0.25, pv=0.30, head=1.01)


def balanced(mag: float) -> dict[str, complex]:
    return {p: cmath.rect(mag, math.radians(d)) for p, d in (("A", 0.0), ("B", -120.0), ("C", 120.0))}


def ieee13() -> Feeder:
    buses = [Bus(b, tuple(ph), x, y) for b, ph, x, y in BUSES13]
    lines = []
    for lid, fb, tb, cfg, ft in LINES13:
        ph, r, x, b = CONFIGS[cfg]
        miles = ft * LENGTH_SCALE / MILE_FT
        lines.append(LineSegment(lid, fb, tb, tuple(ph),
                                 [[v * miles for v in row] for row in r],
                                 [[v * miles for v in row] for row in x],
                                 [[v * miles * 1e-6 for v in row] for row in b]))
    trs = [Transformer("XFM1", "633", "634", ("A", "B", "C"), (XFMR_Z[0],) * 3, (XFMR_Z[1],) * 3,
                       (XFMR_LOSS_KW,) * 3)]
    loads = [Load(i, b, p, kw, kvar) for i, b, p, kw, kvar in LOADS13]
    pvs = [PVUnit(i, b, p, kw, bool(c), 0.8, DEFAULT_BREAKPOINTS if c else None) for i, b, p, kw, c in PV13]
    return Feeder(buses, lines, trs, loads, pvs, "650", V_BASE_KV, S_BASE_KVA, 0.95, 1.05,
                  name="ieee13_pv")


def condition(sid, load, pv, head, prob=None, loads=None, pvs=None) -> Scenario:
    loads = LOADS13 if loads is None else loads
    pvs = PV13 if pvs is None else pvs
    demand = {PhaseNodeId(b, p): (round(kw * load, 6), round(kvar * load, 6)) for _, b, p, kw, kvar in loads}
    mpp = {i: round(kw * pv, 6) for i, _, _, kw, _ in pvs}
    return Scenario(sid, prob, demand, mpp, balanced(head))


def ieee13_day() -> TimeSeriesInput:
    # clear-sky irradiance and a spring weekday load shape, hourly
    steps = []
    for h in range(24):
        irr = max(0.0, math.sin(math.pi * (h - 6) / 12.0)) ** 1.3 if 6 < h < 18 else 0.0
        load = 0.20 + 0.03 * math.exp(-((h - 8) / 2.5) ** 2) + 0.06 * math.exp(-((h - 19.5) / 2.5) ** 2)
        head = 1.03 + 0.01 * irr
        steps.append(condition(f"h{h:02d}", load, OVER["pv"] * irr, head))
    return TimeSeriesInput(tuple(steps), 60.0)


def ieee13_manifest() -> dict:
    nodes = [(b, p) for b, ph, _, _ in BUSES13 for p in ph]
    out = {
        "buses": len(BUSES13),
        "node_phases": len(nodes),
        "lines": len(LINES13),
        "line_phases": sum(len(CONFIGS[c][0]) for *_, c, _ in LINES13),
        "transformers": 1,
        "loads": len(LOADS13),
        "pv": len(PV13),
        "candidates": sum(c for *_, c in PV13),
    }
    for p in "ABC":
        out[f"nodes_{p}"] = sum(1 for _, q in nodes if q == p)
        out[f"loads_{p}"] = sum(1 for row in LOADS13 if row[2] == p)
        out[f"pv_{p}"] = sum(1 for row in PV13 if row[2] == p)
    return out


# -- two-bus single-phase case ---------------------------------------------

def two_bus() -> Feeder:
    # 1000 kW per phase base: z = 0.01 + j0.01 pu, load 0.1 + j0.05 pu
    return Feeder([Bus("src", ("A",), 0.0, 0.0), Bus("load", ("A",), 1.0, 0.0)],
                  [LineSegment("L1", "src", "load", ("A",), [[0.01]], [[0.01]], [[0.0]])],
                  [], [Load("D1", "load", "A", 100.0, 50.0)], [], "src", 12.47, 3000.0,
                  per_unit=True, name="two_bus")


# -- single-culprit radial feeder ------------------------------------------

def culprit() -> tuple[Feeder, list[Scenario]]:
    """Two single-phase laterals; only the large PV at the end of lateral 1 over-voltages."""
    r, x = 0.35, 0.32  # ohm per segment at 12.47 kV
    buses = [Bus("S", ("A",), 0.0, 0.0)]
    lines, loads = [], []
    for lat, dx in (("1", 1.0), ("2", -1.0)):
        prev = "S"
        for k in range(1, 5):
            b = f"N{lat}{k}"
            buses.append(Bus(b, ("A",), dx * k, -k * 0.3))
            lines.append(LineSegment(f"L{lat}{k}", prev, b, ("A",), [[r * 6]], [[x * 6]], [[0.0]]))
            loads.append(Load(f"D{lat}{k}", b, "A", 40.0, 12.0))
            prev = b
    pvs = [PVUnit("PVbig", "N14", "A", 900.0, True, 0.8, DEFAULT_BREAKPOINTS),
           PVUnit("PV12", "N12", "A", 60.0, True, 0.8, DEFAULT_BREAKPOINTS),
           PVUnit("PV23", "N23", "A", 60.0, True, 0.8, DEFAULT_BREAKPOINTS),
           PVUnit("PV24", "N24", "A", 60.0, True, 0.8, DEFAULT_BREAKPOINTS)]
    f = Feeder(buses, lines, [], loads, pvs, "S", 12.47, 3000.0, name="single_culprit")
    demand = {ld.node: (20.0, 6.0) for ld in loads}
    mpp = {"PVbig": 720.0, "PV12": 50.0, "PV23": 50.0, "PV24": 50.0}
    sc = Scenario("noon", None, demand, mpp, {"A": complex(1.02, 0.0)})
    return f, [sc]


# -- two-inverter instability case -----------------------------------------
R_OSC, X_OSC, OSC_HEAD = 0.23, 0.58, 1.01

def oscillation() -> tuple[Feeder, list[Scenario]]:
    """Two inverters on adjacent buses at the end of a common line."""
    buses = [Bus("S", ("A",), 0.0, 0.0), Bus("M", ("A",), 1.0, 0.0),
             Bus("E1", ("A",), 2.0, 0.0), Bus("E2", ("A",), 2.0, -0.5)]
    lines = [LineSegment("L1", "S", "M", ("A",), [[R_OSC]], [[X_OSC]], [[0.0]]),
             LineSegment("L2", "M", "E1", ("A",), [[0.02]], [[0.03]], [[0.0]]),
             LineSegment("L3", "M", "E2", ("A",), [[0.02]], [[0.03]], [[0.0]])]
    loads = [Load("D1", "E1", "A", 20.0, 4.0), Load("D2", "E2", "A", 20.0, 4.0)]
    pvs = [PVUnit("INV1", "E1", "A", 400.0, True, 0.8, DEFAULT_BREAKPOINTS),
           PVUnit("INV2", "E2", "A", 400.0, True, 0.8, DEFAULT_BREAKPOINTS)]
    f = Feeder(buses, lines, [], loads, pvs, "S", V_BASE_KV, S_BASE_KVA, name="two_inverter")
    sc = Scenario("peak", None, {ld.node: (20.0, 4.0) for ld in loads},
                  {"INV1": 350.0, "INV2": 350.0}, {"A": complex(OSC_HEAD, 0.0)})
    return f, [sc]


def write(name: str, text: str) -> None:
    (DATA / name).write_text(text)
    print("wrote", DATA / name)


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    f13 = ieee13()
    write("ieee13.feeder", dump_feeder(f13))
    write("ieee13.scenarios", dump_conditions([condition("over", **OVER, prob=0.5),
                                               condition("under", **UNDER, prob=0.5)]))
    write("ieee13_mild.scenarios", dump_conditions([condition("mild", **MILD)]))
    write("ieee13_day.timeseries", dump_timeseries(ieee13_day()))
    write("ieee13_manifest.json", json.dumps(ieee13_manifest(), indent=2, sort_keys=True) + "\n")
    write("two_bus.feeder", dump_feeder(two_bus()))
    write("two_bus.scenarios", dump_conditions([Scenario("base", None, {PhaseNodeId("load", "A"): (100.0, 50.0)})]))
    cf, cs = culprit()
    write("single_culprit.feeder", dump_feeder(cf))
    write("single_culprit.scenarios", dump_conditions(cs))
    of, osc = oscillation()
    write("two_inverter.feeder", dump_feeder(of))
    write("two_inverter.scenarios", dump_conditions(osc))


if __name__ == "__main__":
    main()
