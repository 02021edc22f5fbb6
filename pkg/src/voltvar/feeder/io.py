"""Line-oriented text format for feeders, scenario sets and time series.

A file is a sequence of ``[section arg]`` headers.  Inside a section a line
is either ``key = value`` or a comma-separated data row; ``#`` starts a
comment.  Numeric lists inside one field are space separated.  Matrices
are written as their row-major lower triangle (``a11 a21 a22 a31 ...``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ParseError, ScenarioError
from .model import (PHASES, Bus, Feeder, LineSegment, Load, PhaseNodeId, PVUnit,
                    Transformer)
from .scenario import Scenario, TimeSeriesInput, validate_condition, validate_scenarios


@dataclass
class Section:
    name: str
    arg: str | None
    line: int
    entries: list[tuple[int, str | None, str]] = field(default_factory=list)

    def settings(self, path=None) -> dict[str, tuple[int, str]]:
        out = {}
        for ln, key, val in self.entries:
            if key is not None:
                if key in out:
                    raise ParseError(f"duplicate key {key!r} in [{self.name}]", path, ln)
                out[key] = (ln, val)
        return out

    def rows(self):
        for ln, key, val in self.entries:
            if key is None:
                yield ln, [f.strip() for f in val.split(",")]

    def keyed(self, key):
        for ln, k, val in self.entries:
            if k == key:
                yield ln, [f.strip() for f in val.split(",")]


def parse_sections(text: str, path: str | None = None) -> list[Section]:
    sections: list[Section] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"unterminated section header {line!r}", path, ln)
            parts = line[1:-1].split(None, 1)
            if not parts:
                raise ParseError("empty section header", path, ln)
            sections.append(Section(parts[0].lower(), parts[1].strip() if len(parts) > 1 else None, ln))
            continue
        if not sections:
            raise ParseError("content before the first section header", path, ln)
        key, sep, val = line.partition("=")
        if sep and "," not in key and key.strip().replace("_", "").isalnum():
            sections[-1].entries.append((ln, key.strip().lower(), val.strip()))
        else:
            sections[-1].entries.append((ln, None, line))
    return sections


def _float(tok: str, path, ln) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"expected a number, got {tok!r}", path, ln) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite number {tok!r}", path, ln)
    return v


def _floats(tok: str, path, ln) -> list[float]:
    return [_float(t, path, ln) for t in tok.split()]


def _phases(tok: str, path, ln) -> tuple[str, ...]:
    ph = tuple(tok.strip().upper())
    if not ph or any(p not in PHASES for p in ph):
        raise ParseError(f"invalid phase set {tok!r}", path, ln)
    return ph


def _lower_tri(vals: list[float], n: int, path, ln):
    if len(vals) != n * (n + 1) // 2:
        raise ParseError(f"expected {n * (n + 1) // 2} lower-triangle values for {n} phases, "
                         f"got {len(vals)}", path, ln)
    m = [[0.0] * n for _ in range(n)]
    k = 0
    for i in range(n):
        for j in range(i + 1):
            m[i][j] = m[j][i] = vals[k]
            k += 1
    return m


def _need(fields, n, path, ln, what):
    if len(fields) < n:
        raise ParseError(f"{what} row needs at least {n} fields, got {len(fields)}", path, ln)


# -- feeder -----------------------------------------------------------------

def parse_feeder(text: str, path: str | None = None) -> Feeder:
    secs = parse_sections(text, path)
    by_name: dict[str, Section] = {}
    for s in secs:
        if s.name in by_name:
            raise ParseError(f"duplicate section [{s.name}]", path, s.line)
        by_name[s.name] = s
    for req in ("buses", "substation", "bases"):
        if req not in by_name:
            raise ParseError(f"missing section [{req}]", path)

    def setting(sec, key, default=None, conv=None):
        s = by_name.get(sec)
        vals = s.settings(path) if s else {}
        if key not in vals:
            if default is None:
                raise ParseError(f"[{sec}] needs {key} =", path)
            return default
        ln, v = vals[key]
        return conv(v, path, ln) if conv else v

    name = setting("feeder", "name", "feeder")
    v_base = setting("bases", "v_base_kv", conv=_float)
    s_base = setting("bases", "s_base_kva", conv=_float)
    units = setting("bases", "units", "physical")
    if units not in ("physical", "per_unit"):
        raise ParseError(f"units must be physical or per_unit, got {units!r}", path)
    v_min = setting("limits", "v_min", 0.95, _float)
    v_max = setting("limits", "v_max", 1.05, _float)
    sub = setting("substation", "bus")

    buses = []
    for ln, f in by_name["buses"].rows():
        _need(f, 2, path, ln, "bus")
        x = _float(f[2], path, ln) if len(f) > 2 and f[2] else None
        y = _float(f[3], path, ln) if len(f) > 3 and f[3] else None
        buses.append(Bus(f[0], _phases(f[1], path, ln), x, y))

    lines = []
    if "lines" in by_name:
        for ln, f in by_name["lines"].rows():
            _need(f, 7, path, ln, "line")
            ph = _phases(f[3], path, ln)
            n = len(ph)
            lines.append(LineSegment(f[0], f[1], f[2], ph,
                                     _lower_tri(_floats(f[4], path, ln), n, path, ln),
                                     _lower_tri(_floats(f[5], path, ln), n, path, ln),
                                     _lower_tri(_floats(f[6], path, ln), n, path, ln)))

    trs = []
    if "transformers" in by_name:
        for ln, f in by_name["transformers"].rows():
            _need(f, 7, path, ln, "transformer")
            trs.append(Transformer(f[0], f[1], f[2], _phases(f[3], path, ln),
                                   tuple(_floats(f[4], path, ln)), tuple(_floats(f[5], path, ln)),
                                   tuple(_floats(f[6], path, ln))))

    loads = []
    if "loads" in by_name:
        for ln, f in by_name["loads"].rows():
            _need(f, 5, path, ln, "load")
            loads.append(Load(f[0], f[1], _phases(f[2], path, ln)[0],
                              _float(f[3], path, ln), _float(f[4], path, ln)))

    pvs = []
    if "pv" in by_name:
        sec = by_name["pv"]
        conf = sec.settings(path)
        pf_default = _float(conf["pf_min"][1], path, conf["pf_min"][0]) if "pf_min" in conf else 0.8
        qv_default = tuple(_floats(conf["qv"][1], path, conf["qv"][0])) if "qv" in conf else None
        for ln, f in sec.rows():
            _need(f, 5, path, ln, "pv")
            if f[4] not in ("0", "1"):
                raise ParseError(f"candidate flag must be 0 or 1, got {f[4]!r}", path, ln)
            cand = f[4] == "1"
            pf = _float(f[5], path, ln) if len(f) > 5 and f[5] else pf_default
            qv = tuple(_floats(f[6], path, ln)) if len(f) > 6 and f[6] else (qv_default if cand else None)
            pvs.append(PVUnit(f[0], f[1], _phases(f[2], path, ln)[0], _float(f[3], path, ln),
                              cand, pf, qv))

    return Feeder(tuple(buses), tuple(lines), tuple(trs), tuple(loads), tuple(pvs), sub,
                  v_base, s_base, v_min, v_max, per_unit=(units == "per_unit"), name=name)


def load_feeder(path) -> Feeder:
    """Read and validate a feeder file."""
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    return parse_feeder(text, path)


def _num(v: float) -> str:
    return repr(float(v))


def _tri(m) -> str:
    return " ".join(_num(m[i][j]) for i in range(len(m)) for j in range(i + 1))


def dump_feeder(feeder: Feeder) -> str:
    out = ["[feeder]", f"name = {feeder.name}", "",
           "[bases]", f"v_base_kv = {_num(feeder.v_base_kv)}", f"s_base_kva = {_num(feeder.s_base_kva)}",
           f"units = {'per_unit' if feeder.per_unit else 'physical'}", "",
           "[limits]", f"v_min = {_num(feeder.v_min)}", f"v_max = {_num(feeder.v_max)}", "",
           "[substation]", f"bus = {feeder.substation}", "",
           "[buses]", "# id, phases, x, y"]
    for b in feeder.buses:
        xy = "" if b.x is None and b.y is None else \
            f", {'' if b.x is None else _num(b.x)}, {'' if b.y is None else _num(b.y)}"
        out.append(f"{b.id}, {''.join(b.phases)}{xy}")
    out += ["", "[lines]", "# id, from, to, phases, r, x, b (row-major lower triangle)"]
    for ln in feeder.lines:
        out.append(f"{ln.id}, {ln.from_bus}, {ln.to_bus}, {''.join(ln.phases)}, "
                   f"{_tri(ln.r)}, {_tri(ln.x)}, {_tri(ln.b)}")
    out += ["", "[transformers]", "# id, from, to, phases, r, x, no_load_loss (per phase)"]
    for tr in feeder.transformers:
        out.append(f"{tr.id}, {tr.from_bus}, {tr.to_bus}, {''.join(tr.phases)}, "
                   f"{' '.join(map(_num, tr.r))}, {' '.join(map(_num, tr.x))}, "
                   f"{' '.join(map(_num, tr.no_load_loss))}")
    out += ["", "[loads]", "# id, bus, phase, p, q"]
    for ld in feeder.loads:
        out.append(f"{ld.id}, {ld.bus}, {ld.phase}, {_num(ld.p)}, {_num(ld.q)}")
    out += ["", "[pv]", "# id, bus, phase, p_rated, candidate, pf_min, qv"]
    for g in feeder.pv_units:
        qv = "" if g.qv is None else " ".join(map(_num, g.qv))
        out.append(f"{g.id}, {g.bus}, {g.phase}, {_num(g.p_rated)}, {int(g.candidate)}, "
                   f"{_num(g.pf_min)}, {qv}")
    return "\n".join(out) + "\n"


def save_feeder(feeder: Feeder, path) -> None:
    Path(path).write_text(dump_feeder(feeder))


# -- scenarios --------------------------------------------------------------

def _parse_condition(sec: Section, path) -> Scenario:
    prob = None
    weights = None
    demand: dict[PhaseNodeId, tuple[float, float]] = {}
    mpp: dict[str, float] = {}
    head: dict[str, complex] = {}
    losses: dict[tuple[str, str], float] = {}
    for ln, key, val in sec.entries:
        f = [x.strip() for x in val.split(",")]
        if key == "probability":
            prob = _float(val, path, ln)
        elif key == "weights":
            w = _floats(val, path, ln)
            if len(w) != 2:
                raise ParseError("weights needs two values: wo wv", path, ln)
            weights = (w[0], w[1])
        elif key == "demand":
            _need(f, 4, path, ln, "demand")
            node = PhaseNodeId(f[0], _phases(f[1], path, ln)[0])
            if node in demand:
                raise ParseError(f"duplicate demand for {node}", path, ln)
            demand[node] = (_float(f[2], path, ln), _float(f[3], path, ln))
        elif key == "mpp":
            _need(f, 2, path, ln, "mpp")
            if f[0] in mpp:
                raise ParseError(f"duplicate mpp for {f[0]}", path, ln)
            mpp[f[0]] = _float(f[1], path, ln)
        elif key == "feeder_head":
            _need(f, 3, path, ln, "feeder_head")
            head[_phases(f[0], path, ln)[0]] = complex(_float(f[1], path, ln), _float(f[2], path, ln))
        elif key == "no_load_loss":
            _need(f, 3, path, ln, "no_load_loss")
            losses[(f[0], _phases(f[1], path, ln)[0])] = _float(f[2], path, ln)
        else:
            raise ParseError(f"unknown scenario entry {key or val!r}", path, ln)
    if not sec.arg:
        raise ParseError(f"[{sec.name}] needs an id", path, sec.line)
    return Scenario(sec.arg, prob, demand, mpp, head, weights, losses)


def parse_scenarios(text: str, feeder: Feeder, path: str | None = None) -> list[Scenario]:
    secs = parse_sections(text, path)
    out = []
    for sec in secs:
        if sec.name != "scenario":
            raise ParseError(f"unexpected section [{sec.name}]", path, sec.line)
        out.append(_parse_condition(sec, path))
    return validate_scenarios(out, feeder)


def load_scenarios(path, feeder: Feeder) -> list[Scenario]:
    """Read scenario blocks, check them against ``feeder`` and normalise probabilities."""
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    return parse_scenarios(text, feeder, path)


def dump_conditions(conditions, section: str = "scenario") -> str:
    out = []
    for s in conditions:
        out.append(f"[{section} {s.id}]")
        if s.probability is not None and section == "scenario":
            out.append(f"probability = {_num(s.probability)}")
        if s.weights is not None:
            out.append(f"weights = {_num(s.weights[0])} {_num(s.weights[1])}")
        for p, v in sorted(s.feeder_head.items()):
            out.append(f"feeder_head = {p}, {_num(v.real)}, {_num(v.imag)}")
        for node, (p, q) in s.demand.items():
            out.append(f"demand = {node.bus}, {node.phase}, {_num(p)}, {_num(q)}")
        for gid, kw in s.mpp.items():
            out.append(f"mpp = {gid}, {_num(kw)}")
        for (tid, p), kw in s.no_load_loss.items():
            out.append(f"no_load_loss = {tid}, {p}, {_num(kw)}")
        out.append("")
    return "\n".join(out)


def load_timeseries(path, feeder: Feeder) -> TimeSeriesInput:
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    step_minutes = 60.0
    steps = []
    for sec in parse_sections(text, path):
        if sec.name == "timeseries":
            conf = sec.settings(path)
            if "step_minutes" in conf:
                step_minutes = _float(conf["step_minutes"][1], path, conf["step_minutes"][0])
        elif sec.name == "step":
            s = _parse_condition(sec, path)
            validate_condition(s, feeder)
            steps.append(s)
        else:
            raise ParseError(f"unexpected section [{sec.name}]", path, sec.line)
    if not steps:
        raise ScenarioError("time series has no [step] blocks")
    return TimeSeriesInput(tuple(steps), step_minutes)


def dump_timeseries(ts: TimeSeriesInput) -> str:
    return f"[timeseries]\nstep_minutes = {_num(ts.step_minutes)}\n\n" + dump_conditions(ts.steps, "step")


__all__ = ["parse_sections", "parse_feeder", "load_feeder", "dump_feeder", "save_feeder",
           "parse_scenarios", "load_scenarios", "dump_conditions", "load_timeseries",
           "dump_timeseries"]
