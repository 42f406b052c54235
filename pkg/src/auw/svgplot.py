"""Self-contained SVG line charts for objective-versus-time traces.

No plotting dependency: the output is a single SVG document whose polylines
tests can parse directly. The vertical axis is log-scaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import AuwError

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
_WIDTH, _HEIGHT = 720, 480
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 80, 24, 32, 56


@dataclass(frozen=True)
class Series:
    label: str
    times_ms: tuple[float, ...]
    objectives: tuple[float, ...]


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_objective_plot(series_list: list[Series], path,
                          title: str = "objective vs wall clock") -> None:
    """Write a log-scale objective/time chart, one polyline per series."""
    cleaned = []
    for s in series_list:
        pts = [(t, v) for t, v in zip(s.times_ms, s.objectives) if v > 0.0]
        if pts:
            cleaned.append((s.label, pts))
    if not cleaned:
        raise AuwError("nothing to plot: no positive objective values")

    xs = [t for _, pts in cleaned for t, _ in pts]
    ys = [v for _, pts in cleaned for _, v in pts]
    x_lo, x_hi = min(xs), max(xs)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    ly_lo, ly_hi = math.log10(min(ys)), math.log10(max(ys))
    if ly_hi == ly_lo:
        ly_hi = ly_lo + 1.0

    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def px(t):
        return _MARGIN_L + (t - x_lo) / (x_hi - x_lo) * plot_w

    def py(v):
        return _MARGIN_T + (ly_hi - math.log10(v)) / (ly_hi - ly_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<rect x="{_MARGIN_L}" y="{_MARGIN_T}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="black"/>',
    ]

    for d in range(math.floor(ly_lo), math.floor(ly_hi) + 1):
        v = 10.0 ** d
        if not (ly_lo <= d <= ly_hi):
            continue
        y = py(v)
        out.append(f'<line x1="{_MARGIN_L - 4}" y1="{y:.2f}" x2="{_MARGIN_L}" y2="{y:.2f}" '
                   'stroke="black"/>')
        out.append(f'<text x="{_MARGIN_L - 8}" y="{y + 4:.2f}" text-anchor="end" '
                   f'font-size="11">1e{d}</text>')

    for i in range(5):
        t = x_lo + i * (x_hi - x_lo) / 4
        x = px(t)
        y = _MARGIN_T + plot_h
        out.append(f'<line x1="{x:.2f}" y1="{y}" x2="{x:.2f}" y2="{y + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{y + 18}" text-anchor="middle" '
                   f'font-size="11">{t:.0f}</text>')
    out.append(f'<text x="{_MARGIN_L + plot_w / 2}" y="{_HEIGHT - 12}" text-anchor="middle" '
               'font-size="12">wall clock (ms)</text>')

    for i, (label, pts) in enumerate(cleaned):
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(t):.2f},{py(v):.2f}" for t, v in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                   'stroke-width="1.5"/>')
        ly = _MARGIN_T + 16 + 16 * i
        lx = _MARGIN_L + plot_w - 150
        out.append(f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 24}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 30}" y="{ly}" font-size="12">{_esc(label)}</text>')

    out.append("</svg>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + "\n")


def series_from_trace_rows(label: str, rows: list[dict]) -> Series:
    return Series(label,
                  tuple(r["wall_clock_ms"] for r in rows),
                  tuple(r["objective"] for r in rows))
