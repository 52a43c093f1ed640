"""Minimal hand-rendered SVG charts (grouped bars, log-log scatter with a fit line)."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT, PAD = 720, 360, 48


def _frame(title: str, body: list[str]) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD / 2}" y2="{HEIGHT - PAD}" stroke="black"/>',
            f'<line x1="{PAD}" y1="{PAD / 2 + 10}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def paired_bars(title: str, first, second, labels=("true", "approx"), colors=("#1f6fbf", "#70ad47")) -> str:
    """Two bar series side by side per index (e.g. true vs. approximate count per pair)."""
    n = len(first)
    top = max(max(first, default=0), max(second, default=0), 1)
    plot_w, plot_h = WIDTH - 1.5 * PAD, HEIGHT - 1.5 * PAD - 10
    slot = plot_w / max(n, 1)
    body = []
    for i, (a, b) in enumerate(zip(first, second)):
        for j, (v, color) in enumerate(((a, colors[0]), (b, colors[1]))):
            h = plot_h * v / top
            x = PAD + i * slot + j * slot / 2
            body.append(f'<rect x="{x:.2f}" y="{HEIGHT - PAD - h:.2f}" width="{slot / 2:.2f}" '
                        f'height="{h:.2f}" fill="{color}"/>')
    for j, (label, color) in enumerate(zip(labels, colors)):
        body.append(f'<rect x="{WIDTH - 140}" y="{30 + 16 * j}" width="10" height="10" fill="{color}"/>')
        body.append(f'<text x="{WIDTH - 125}" y="{39 + 16 * j}">{escape(label)}</text>')
    body.append(f'<text x="{PAD - 4}" y="{PAD / 2 + 20}" text-anchor="end">{top:g}</text>')
    body.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - PAD + 30}" text-anchor="middle">pair index</text>')
    return _frame(title, body)


def loglog_scatter(title: str, xs, ys, fit=None) -> str:
    """Points on log-log axes; ``fit = (slope, intercept)`` in natural-log space draws a line."""
    pts = [(math.log10(x), math.log10(y)) for x, y in zip(xs, ys) if x > 0 and y > 0]
    if not pts:
        return _frame(title, [])
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    x1, y1 = max(x1, x0 + 1e-9), max(y1, y0 + 1e-9)

    def px(x, y):
        return (PAD + (x - x0) / (x1 - x0) * (WIDTH - 1.5 * PAD),
                HEIGHT - PAD - (y - y0) / (y1 - y0) * (HEIGHT - 1.5 * PAD - 10))

    body = []
    for x, y in pts:
        cx, cy = px(x, y)
        body.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2.5" fill="#1f6fbf"/>')
    if fit is not None:
        slope, icpt = fit
        ends = []
        for x in (x0, x1):
            y = (slope * x * math.log(10) + icpt) / math.log(10)
            ends.append(px(x, y))
        body.append(f'<line x1="{ends[0][0]:.2f}" y1="{ends[0][1]:.2f}" x2="{ends[1][0]:.2f}" '
                    f'y2="{ends[1][1]:.2f}" stroke="#c00000"/>')
        body.append(f'<text x="{WIDTH - 160}" y="40">slope {slope:.3f}</text>')
    body.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - PAD + 30}" text-anchor="middle">'
                f'log10 count [{x0:.2f}, {x1:.2f}]</text>')
    body.append(f'<text x="12" y="{HEIGHT / 2}" transform="rotate(-90 12 {HEIGHT / 2})" text-anchor="middle">'
                f'log10 TV [{y0:.2f}, {y1:.2f}]</text>')
    return _frame(title, body)
