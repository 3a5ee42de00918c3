"""Hand-written SVG line charts and scatter plots (no plotting dependency)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")
W, H = 640, 400
ML, MR, MT, MB = 70, 150, 40, 50


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _frame(title: str, xlabel: str, ylabel: str, xr, yr):
    (x0, x1), (y0, y1) = xr, yr
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = W - ML - MR, H - MT - MB

    def sx(x):
        return ML + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return MT + ph - (y - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{ML}" y="{MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        f'<text x="{ML + pw / 2}" y="{H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="15" y="{MT + ph / 2}" text-anchor="middle" '
        f'transform="rotate(-90 15 {MT + ph / 2})">{escape(ylabel)}</text>',
    ]
    for x in _ticks(x0, x1):
        parts.append(f'<text x="{sx(x):.1f}" y="{MT + ph + 15}" text-anchor="middle">{x:.3g}</text>')
    for y in _ticks(y0, y1):
        parts.append(f'<line x1="{ML}" x2="{ML + pw}" y1="{sy(y):.1f}" y2="{sy(y):.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{ML - 5}" y="{sy(y) + 4:.1f}" text-anchor="end">{y:.3g}</text>')
    return parts, sx, sy


def _legend(parts, names):
    for i, name in enumerate(names):
        y = MT + 10 + 16 * i
        c = PALETTE[i % len(PALETTE)]
        parts.append(f'<rect x="{W - MR + 10}" y="{y - 8}" width="10" height="10" fill="{c}"/>')
        parts.append(f'<text x="{W - MR + 25}" y="{y + 1}">{escape(name)}</text>')


def _bounds(series):
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    if not xs:
        return (0.0, 1.0), (0.0, 1.0)
    return (min(xs), max(xs)), (min(ys), max(ys))


def line_chart(series: dict, path, title="", xlabel="", ylabel="") -> Path:
    """``series`` maps a label to a list of (x, y) points."""
    xr, yr = _bounds(series)
    parts, sx, sy = _frame(title, xlabel, ylabel, xr, yr)
    for i, (name, pts) in enumerate(series.items()):
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{PALETTE[i % len(PALETTE)]}" '
                     f'stroke-width="1.5" points="{coords}"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


def scatter_plot(series: dict, path, title="", xlabel="", ylabel="") -> Path:
    xr, yr = _bounds(series)
    parts, sx, sy = _frame(title, xlabel, ylabel, xr, yr)
    for i, (name, pts) in enumerate(series.items()):
        c = PALETTE[i % len(PALETTE)]
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="4" fill="{c}"/>')
    _legend(parts, list(series))
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
