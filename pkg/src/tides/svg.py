"""Dependency-free line charts as standalone SVG.

Output depends only on the inputs, so identical series give byte-identical
files.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=55)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _label(v: float) -> str:
    return f"{v:.3g}"


def render_svg(
    series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
    xlabel: str,
    ylabel: str,
    title: str = "",
    log_x: bool = False,
) -> str:
    """One polyline per named (xs, ys) pair, with axes and a legend."""
    if not series:
        raise ValueError("emit_svg needs at least one series")
    pts = {}
    for name, (xs, ys) in series.items():
        xs, ys = [float(x) for x in xs], [float(y) for y in ys]
        if not xs or len(xs) != len(ys):
            raise ValueError(f"series {name!r} must have equal, non-zero numbers of x and y values")
        if log_x and min(xs) <= 0:
            raise ValueError(f"series {name!r} has non-positive x values on a log axis")
        keep = [(x, y) for x, y in zip(xs, ys) if math.isfinite(y)]
        pts[name] = keep
    tx = (lambda x: math.log10(x)) if log_x else (lambda x: x)
    all_x = [tx(x) for p in pts.values() for x, _ in p] or [0.0, 1.0]
    all_y = [y for p in pts.values() for _, y in p] or [0.0, 1.0]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y), max(all_y)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (tx(x) - x0) / (x1 - x0) * pw

    def sy(y):
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>')
    bx, by = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{bx}" y1="{by}" x2="{bx + pw}" y2="{by}" stroke="black"/>')
    out.append(f'<line x1="{bx}" y1="{MARGIN["top"]}" x2="{bx}" y2="{by}" stroke="black"/>')
    for t in _ticks(x0, x1):
        px = MARGIN["left"] + (t - x0) / (x1 - x0) * pw
        val = 10**t if log_x else t
        out.append(f'<line x1="{_fmt(px)}" y1="{by}" x2="{_fmt(px)}" y2="{by + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(px)}" y="{by + 18}" text-anchor="middle" font-size="11">{_label(val)}</text>')
    for t in _ticks(y0, y1):
        py = sy(t)
        out.append(f'<line x1="{bx - 5}" y1="{_fmt(py)}" x2="{bx}" y2="{_fmt(py)}" stroke="black"/>')
        out.append(f'<text x="{bx - 8}" y="{_fmt(py + 4)}" text-anchor="end" font-size="11">{_label(t)}</text>')
    out.append(f'<text x="{bx + pw / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="13">{escape(xlabel)}</text>')
    out.append(
        f'<text x="16" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2})">{escape(ylabel)}</text>'
    )
    lx = MARGIN["left"] + pw + 15
    for i, (name, p) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in p)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = MARGIN["top"] + 10 + 20 * i
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_svg(series, xlabel: str, ylabel: str, path: str | Path, title: str = "", log_x: bool = False) -> Path:
    from .manifest import atomic_write_text

    return atomic_write_text(Path(path), render_svg(series, xlabel, ylabel, title, log_x))
