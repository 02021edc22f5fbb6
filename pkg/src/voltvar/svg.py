"""Static SVG figures written as plain text (no plotting dependency)."""

from __future__ import annotations

import math
from collections import deque
from html import escape
from pathlib import Path

import numpy as np

WIDTH, HEIGHT = 640, 420
MARGIN = (60, 20, 30, 50)  # left, right, top, bottom
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _n(x: float) -> str:
    return f"{x:.2f}"


class _Figure:
    def __init__(self, title: str, width: int = WIDTH, height: int = HEIGHT):
        self.w, self.h = width, height
        self.parts = [f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
                      f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">'
                      f'{escape(title)}</text>']

    def add(self, element: str) -> None:
        self.parts.append(element)

    def line(self, x1, y1, x2, y2, color="black", width=1.0, dash=None):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{_n(x1)}" y1="{_n(y1)}" x2="{_n(x2)}" y2="{_n(y2)}" '
                 f'stroke="{color}" stroke-width="{width}"{extra}/>')

    def text(self, x, y, s, size=11, anchor="middle", rotate=None):
        tr = f' transform="rotate({rotate} {_n(x)} {_n(y)})"' if rotate is not None else ""
        self.add(f'<text x="{_n(x)}" y="{_n(y)}" font-size="{size}" text-anchor="{anchor}"{tr}>'
                 f'{escape(str(s))}</text>')

    def circle(self, x, y, r, fill, stroke="none"):
        self.add(f'<circle cx="{_n(x)}" cy="{_n(y)}" r="{_n(r)}" fill="{fill}" stroke="{stroke}"/>')

    def polyline(self, pts, color, width=1.5):
        coords = " ".join(f"{_n(x)},{_n(y)}" for x, y in pts)
        self.add(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}"/>')

    def rect(self, x, y, w, h, fill):
        self.add(f'<rect x="{_n(x)}" y="{_n(y)}" width="{_n(w)}" height="{_n(h)}" fill="{fill}"/>')

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}" font-family="sans-serif">\n{body}\n</svg>\n')

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render())
        return path


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not hi > lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + k * step for k in range(int((hi - start) / step + 1e-9) + 1)]


def _range(values, pad: float = 0.05) -> tuple[float, float]:
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=float)
    if not v.size:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        span = max(abs(lo) * 0.01, 1e-6)
        return lo - span, hi + span
    d = (hi - lo) * pad
    return lo - d, hi + d


class _Axes:
    def __init__(self, fig: _Figure, xr, yr, xlabel: str, ylabel: str):
        self.fig = fig
        left, right, top, bottom = MARGIN
        self.x0, self.x1 = left, fig.w - right
        self.y0, self.y1 = fig.h - bottom, top
        self.xr, self.yr = xr, yr
        fig.line(self.x0, self.y0, self.x1, self.y0)
        fig.line(self.x0, self.y0, self.x0, self.y1)
        for t in _ticks(*xr):
            x = self.px(t)
            fig.line(x, self.y0, x, self.y0 + 4)
            fig.text(x, self.y0 + 16, f"{t:.4g}", size=10)
        for t in _ticks(*yr):
            y = self.py(t)
            fig.line(self.x0 - 4, y, self.x0, y)
            fig.text(self.x0 - 6, y + 3, f"{t:.4g}", size=10, anchor="end")
        fig.text((self.x0 + self.x1) / 2, fig.h - 10, xlabel)
        fig.text(14, (self.y0 + self.y1) / 2, ylabel, rotate=-90)

    def px(self, x):
        lo, hi = self.xr
        return self.x0 + (x - lo) / (hi - lo) * (self.x1 - self.x0)

    def py(self, y):
        lo, hi = self.yr
        return self.y0 - (y - lo) / (hi - lo) * (self.y0 - self.y1)

    def legend(self, names):
        for k, name in enumerate(names):
            y = self.y1 + 12 + 14 * k
            self.fig.line(self.x1 - 120, y - 4, self.x1 - 100, y - 4, PALETTE[k % len(PALETTE)], 2)
            self.fig.text(self.x1 - 95, y, name, size=10, anchor="start")


def line_chart(series: dict[str, tuple], path, title: str, xlabel: str, ylabel: str,
               hlines: tuple[float, ...] = ()) -> Path:
    """One polyline per ``name -> (x, y)``; dashed horizontal guides at ``hlines``."""
    xs = [v for x, _ in series.values() for v in np.asarray(x, float)]
    ys = [v for _, y in series.values() for v in np.asarray(y, float)] + list(hlines)
    fig = _Figure(title)
    ax = _Axes(fig, _range(xs, 0.0), _range(ys), xlabel, ylabel)
    for h in hlines:
        fig.line(ax.x0, ax.py(h), ax.x1, ax.py(h), "#999999", 1, "4,3")
    for k, (name, (x, y)) in enumerate(series.items()):
        fig.polyline([(ax.px(a), ax.py(b)) for a, b in zip(x, y)], PALETTE[k % len(PALETTE)])
    if len(series) <= 8:
        ax.legend(list(series))
    return fig.save(path)


def scatter(x, y, path, title: str, xlabel: str, ylabel: str, diagonal: bool = True) -> Path:
    x, y = np.asarray(x, float), np.asarray(y, float)
    lo, hi = _range(np.concatenate([x, y]) if x.size else [0.0, 1.0])
    fig = _Figure(title)
    ax = _Axes(fig, (lo, hi), (lo, hi), xlabel, ylabel)
    if diagonal:
        fig.line(ax.px(lo), ax.py(lo), ax.px(hi), ax.py(hi), "#999999", 1, "4,3")
    for a, b in zip(x, y):
        fig.circle(ax.px(a), ax.py(b), 3, PALETTE[0])
    return fig.save(path)


def histogram(values, path, title: str, xlabel: str, bins: int = 20) -> Path:
    v = np.asarray(values, float)
    counts, edges = np.histogram(v, bins=bins, range=_range(v, 0.0)) if v.size else (np.zeros(bins), np.linspace(0, 1, bins + 1))
    fig = _Figure(title)
    ax = _Axes(fig, (edges[0], edges[-1]), (0.0, max(1.0, float(counts.max())) * 1.05), xlabel, "count")
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        if c:
            fig.rect(ax.px(a), ax.py(c), ax.px(b) - ax.px(a) - 1, ax.py(0) - ax.py(c), PALETTE[0])
    return fig.save(path)


def _layout(feeder) -> dict[str, tuple[float, float]]:
    """Bus coordinates; missing ones come from a breadth-first tree layout."""
    pos = {b.id: (b.x, b.y) for b in feeder.buses if b.x is not None and b.y is not None}
    if len(pos) == len(feeder.buses):
        return pos
    adj: dict[str, list[str]] = {b.id: [] for b in feeder.buses}
    for br in list(feeder.lines) + list(feeder.transformers):
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    depth = {feeder.substation: 0}
    order = []
    queue = deque([feeder.substation])
    while queue:
        b = queue.popleft()
        order.append(b)
        for nb in adj[b]:
            if nb not in depth:
                depth[nb] = depth[b] + 1
                queue.append(nb)
    rank: dict[int, int] = {}
    out = {}
    for b in order:
        d = depth[b]
        out[b] = (float(rank.get(d, 0)), -float(d))
        rank[d] = rank.get(d, 0) + 1
    return out


def feeder_map(feeder, path, placed=(), title: str = "Feeder map") -> Path:
    """Lines, buses and PV units; placed smart inverters are drawn in red."""
    pos = _layout(feeder)
    xs = [p[0] for p in pos.values()]
    ys = [p[1] for p in pos.values()]
    fig = _Figure(title)
    left, right, top, bottom = 40, 40, 40, 40
    xr, yr = _range(xs, 0.05), _range(ys, 0.05)

    def px(x):
        return left + (x - xr[0]) / (xr[1] - xr[0]) * (fig.w - left - right)

    def py(y):
        return fig.h - bottom - (y - yr[0]) / (yr[1] - yr[0]) * (fig.h - top - bottom)

    for br in list(feeder.lines) + list(feeder.transformers):
        (x1, y1), (x2, y2) = pos[br.from_bus], pos[br.to_bus]
        fig.line(px(x1), py(y1), px(x2), py(y2), "#555555", 1.0 + 0.5 * len(br.phases))
    for b in feeder.buses:
        x, y = pos[b.id]
        fig.circle(px(x), py(y), 3.5, "black")
        fig.text(px(x) + 6, py(y) - 6, b.id, size=9, anchor="start")
    placed = set(placed)
    offsets = {"A": (-7, 9), "B": (0, 11), "C": (7, 9)}
    for g in feeder.pv_units:
        x, y = pos[g.bus]
        dx, dy = offsets.get(g.phase, (0, 10))
        if g.id in placed:
            fig.circle(px(x) + dx, py(y) + dy, 5, "#d62728", "black")
        elif g.candidate:
            fig.circle(px(x) + dx, py(y) + dy, 4, "white", "#d62728")
        else:
            fig.circle(px(x) + dx, py(y) + dy, 3, "#ff7f0e")
    fig.text(fig.w - 10, fig.h - 24, f"{len(placed)} placed (filled red); open red: candidate; "
                                     f"orange: other PV", size=10, anchor="end")
    return fig.save(path)
