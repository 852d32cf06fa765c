"""Tiny dependency-free log-log line plots written as SVG."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")

W, H = 640, 440
LEFT, RIGHT, TOP, BOTTOM = 80, 150, 40, 60


def _decades(lo, hi):
    a, b = math.floor(math.log10(lo)), math.ceil(math.log10(hi))
    if a == b:
        b = a + 1
    return a, b


def loglog_svg(path, series, title="", xlabel="", ylabel=""):
    """Write ``series`` (name -> (xs, ys)) as a log-log polyline chart.

    Non-positive or non-finite points are skipped.  Axes span whole decades
    with a tick per decade.
    """
    clean = {}
    for name, (xs, ys) in series.items():
        pts = [(float(x), float(y)) for x, y in zip(xs, ys)
               if x > 0 and y > 0 and math.isfinite(x) and math.isfinite(y)]
        if pts:
            clean[name] = pts
    allx = [p[0] for pts in clean.values() for p in pts] or [1.0, 10.0]
    ally = [p[1] for pts in clean.values() for p in pts] or [1.0, 10.0]
    x0, x1 = _decades(min(allx), max(allx))
    y0, y1 = _decades(min(ally), max(ally))
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(x):
        return LEFT + (math.log10(x) - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (math.log10(y) - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    ystep = max(1, (y1 - y0) // 8)
    for k in range(x0, x1 + 1):
        x = px(10.0**k)
        out.append(f'<line x1="{x:.1f}" y1="{TOP + ph}" x2="{x:.1f}" y2="{TOP + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{TOP + ph + 20}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">1e{k}</text>')
    for k in range(y0, y1 + 1, ystep):
        y = py(10.0**k)
        out.append(f'<line x1="{LEFT - 5}" y1="{y:.1f}" x2="{LEFT}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 8}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">1e{k}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 15}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="13">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{TOP + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="13" transform="rotate(-90 18 {TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, pts) in enumerate(clean.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = TOP + 15 + 18 * i
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly}" x2="{LEFT + pw + 32}" y2="{ly}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 38}" y="{ly + 4}" font-family="sans-serif" font-size="12">'
                   f'{escape(str(name))}</text>')
    out.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(out) + "\n")
