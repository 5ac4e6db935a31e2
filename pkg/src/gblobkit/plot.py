"""Self-contained SVG line plot for distance sweeps (no plotting library, byte-stable output)."""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

from .metrics import SweepRow, crossing_points

WIDTH, HEIGHT = 640, 420
LEFT, RIGHT, TOP, BOTTOM = 70, 20, 20, 55
COLORS = ("#00728f", "#a11173")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _nice_step(span: float, target: int = 6) -> float:
    raw = span / max(target, 1)
    mag = 10 ** math.floor(math.log10(raw))
    for m in (1, 2, 2.5, 5, 10):
        if m * mag >= raw:
            return m * mag
    return 10 * mag


def _ticks(lo: float, hi: float) -> list[float]:
    step = _nice_step(hi - lo)
    first = math.ceil(lo / step - 1e-9) * step
    out = []
    v = first
    while v <= hi + 1e-9 * step:
        out.append(round(v, 10))
        v += step
    return out


def sweep_svg(
    rows: Sequence[SweepRow],
    label_a: str = "A",
    label_b: str = "B",
    xlabel: str = "Distance [m]",
    ylabel: str = "mAP",
) -> str:
    if not rows:
        raise ValueError("nothing to plot")
    xs = [r.cutoff for r in rows]
    ys = [v for r in rows for v in (r.map_a, r.map_b)]
    x0, x1 = min(xs) - 5.0, max(xs) + 5.0
    ylo, yhi = min(ys), max(ys)
    pad = 0.1 * (yhi - ylo) if yhi > ylo else max(abs(yhi) * 0.05, 0.01)
    y0, y1 = ylo - pad, yhi + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x: float) -> float:
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return TOP + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="white" stroke="black"/>',
    ]
    for t in _ticks(y0, y1):
        y = py(t)
        out.append(
            f'<line class="grid" x1="{LEFT}" y1="{y:.2f}" x2="{LEFT + pw}" y2="{y:.2f}" '
            'stroke="#bbbbbb" stroke-dasharray="4 3"/>'
        )
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    for t in _ticks(x0, x1):
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{TOP + ph}" x2="{x:.2f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{TOP + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    out.append(
        f'<text class="xlabel" x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>'
    )
    out.append(
        f'<text class="ylabel" x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>'
    )

    for key, label, color, values in (
        ("a", label_a, COLORS[0], [r.map_a for r in rows]),
        ("b", label_b, COLORS[1], [r.map_b for r in rows]),
    ):
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, values))
        data = " ".join(f"{x!r}:{y!r}" for x, y in zip(xs, values))
        out.append(f'<g class="series series-{key}" data-label="{escape(label)}" data-values="{data}">')
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, values):
            cx, cy = px(x), py(y)
            if key == "a":
                out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="4" fill="white" stroke="{color}" stroke-width="1.5"/>')
            else:
                out.append(
                    f'<rect x="{cx - 4:.2f}" y="{cy - 4:.2f}" width="8" height="8" fill="white" '
                    f'stroke="{color}" stroke-width="1.5"/>'
                )
        out.append("</g>")

    for c in crossing_points(rows):
        x = px(c)
        out.append(
            f'<line class="crossing" data-x="{c:.4f}" x1="{x:.2f}" y1="{TOP}" x2="{x:.2f}" y2="{TOP + ph}" '
            'stroke="#666666" stroke-dasharray="2 2"/>'
        )

    lx, ly = LEFT + 12, TOP + ph - 44
    out.append(f'<rect x="{lx - 6}" y="{ly - 14}" width="150" height="44" fill="white" stroke="#999999"/>')
    for i, (label, color) in enumerate(((label_a, COLORS[0]), (label_b, COLORS[1]))):
        y = ly + 20 * i
        out.append(f'<line x1="{lx}" y1="{y - 4}" x2="{lx + 24}" y2="{y - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{lx + 30}" y="{y}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
