"""Free-format MPS dump and load, enough to hand an instance to another solver."""

from __future__ import annotations

import math
from pathlib import Path

from ..errors import ParseError
from .instance import INF, MipInstance

_SENSE = {"<=": "L", ">=": "G", "=": "E"}
_SENSE_BACK = {v: k for k, v in _SENSE.items()}
OBJ = "COST"


def _num(x: float) -> str:
    return repr(float(x))


def write_mps(instance: MipInstance, path=None) -> str:
    """Serialise ``instance``; returns the text and writes it when ``path`` is given."""
    for name in [v.name for v in instance.variables] + [r.name for r in instance.rows]:
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"name {name!r} cannot be written to MPS")
    lines = [f"NAME {instance.name}", "ROWS", f" N {OBJ}"]
    lines += [f" {_SENSE[r.sense]} {r.name}" for r in instance.rows]
    cols: list[list[tuple[str, float]]] = [[] for _ in instance.variables]
    for r in instance.rows:
        for j in sorted(r.coefs):
            cols[j].append((r.name, r.coefs[j]))
    lines.append("COLUMNS")
    in_int = False
    marker = 0
    for j, v in enumerate(instance.variables):
        if v.binary != in_int:
            tag = "INTORG" if v.binary else "INTEND"
            lines.append(f" MARKER{marker} 'MARKER' '{tag}'")
            marker += 1
            in_int = v.binary
        entries = ([(OBJ, v.obj)] if v.obj else []) + cols[j]
        if not entries:
            entries = [(OBJ, 0.0)]
        lines += [f" {v.name} {row} {_num(a)}" for row, a in entries]
    if in_int:
        lines.append(f" MARKER{marker} 'MARKER' 'INTEND'")
    lines.append("RHS")
    if instance.obj_constant:
        lines.append(f" RHS {OBJ} {_num(-instance.obj_constant)}")
    lines += [f" RHS {r.name} {_num(r.rhs)}" for r in instance.rows if r.rhs]
    lines.append("BOUNDS")
    for v in instance.variables:
        lines += _bounds(v)
    lines.append("ENDATA")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _bounds(v) -> list[str]:
    lb, ub = v.lb, v.ub
    if v.binary and lb == 0.0 and ub == 1.0:
        return [f" BV BND {v.name}"]
    if lb == ub:
        return [f" FX BND {v.name} {_num(lb)}"]
    if lb == -INF and ub == INF:
        return [f" FR BND {v.name}"]
    out = []
    if lb == -INF:
        out.append(f" MI BND {v.name}")
    elif lb != 0.0:
        out.append(f" LO BND {v.name} {_num(lb)}")
    if ub != INF:
        out.append(f" UP BND {v.name} {_num(ub)}")
    return out


def read_mps(source) -> MipInstance:
    """Parse text produced by :func:`write_mps` (or a path to such a file)."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text()
    else:
        text = source
    inst = MipInstance()
    section = None
    obj_row = None
    senses: dict[str, str] = {}
    row_order: list[str] = []
    coefs: dict[str, dict[int, float]] = {}
    rhs: dict[str, float] = {}
    integer = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        if not raw.strip() or raw.startswith("*"):
            continue
        tok = raw.split()
        if not raw[0].isspace():
            section = tok[0]
            if section == "NAME":
                inst.name = tok[1] if len(tok) > 1 else ""
            elif section == "ENDATA":
                break
            elif section not in ("ROWS", "COLUMNS", "RHS", "BOUNDS", "RANGES", "OBJSENSE"):
                raise ParseError(f"unknown MPS section {section}", None, lineno)
            continue
        try:
            if section == "ROWS":
                kind, name = tok
                if kind == "N":
                    obj_row = obj_row or name
                else:
                    senses[name] = _SENSE_BACK[kind]
                    row_order.append(name)
                    coefs[name] = {}
            elif section == "COLUMNS":
                if len(tok) >= 3 and tok[1] == "'MARKER'":
                    integer = tok[2] == "'INTORG'"
                    continue
                name = tok[0]
                if name not in inst._vindex:
                    j = inst.add_var(name, 0.0, 1.0 if integer else INF, binary=integer)
                else:
                    j = inst.var(name)
                for row, val in zip(tok[1::2], tok[2::2]):
                    val = float(val)
                    if row == obj_row:
                        inst.variables[j].obj = val
                    else:
                        coefs[row][j] = val
            elif section == "RHS":
                for row, val in zip(tok[1::2], tok[2::2]):
                    if row == obj_row:
                        inst.obj_constant = -float(val)
                    else:
                        rhs[row] = float(val)
            elif section == "BOUNDS":
                kind, _, name = tok[:3]
                v = inst.variables[inst.var(name)]
                val = float(tok[3]) if len(tok) > 3 else math.nan
                if kind == "UP":
                    v.ub = val
                elif kind == "LO":
                    v.lb = val
                elif kind == "FX":
                    v.lb = v.ub = val
                elif kind == "FR":
                    v.lb, v.ub = -INF, INF
                elif kind == "MI":
                    v.lb = -INF
                elif kind == "PL":
                    v.ub = INF
                elif kind == "BV":
                    v.lb, v.ub, v.binary = 0.0, 1.0, True
                else:
                    raise ParseError(f"unsupported bound type {kind}", None, lineno)
            else:
                raise ParseError(f"unsupported section {section}", None, lineno)
        except (KeyError, ValueError) as exc:
            raise ParseError(f"malformed MPS line: {raw.strip()} ({exc})", None, lineno) from None
    for name in row_order:
        inst.add_row(name, coefs[name], senses[name], rhs.get(name, 0.0))
    return inst
