"""SVG output: schedule Gantt charts and objective-space scatter plots.

Output is plain text with fixed number formatting, so identical inputs give
byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .problem import Instance, decode

CELL_W = 24
CELL_H = 16
MARGIN_L = 70
MARGIN_T = 30
PANEL_GAP = 18
BLUE = (31, 119, 180)


def _shade(fraction: float) -> str:
    """Blend white toward blue; 0 -> white, 1 -> full blue."""
    f = min(max(fraction, 0.0), 1.0)
    r, g, b = (round(255 + (c - 255) * f) for c in BLUE)
    return f"#{r:02x}{g:02x}{b:02x}"


def gantt_svg(inst: Instance, x: np.ndarray, title: str = "schedule") -> str:
    """One panel per component tank; rows are product tanks, columns periods.

    Active cells are shaded blue in proportion to their flow.
    """
    w, q = decode(inst, x)
    n_ct, n_pt, n = inst.shape
    panel_h = n_pt * CELL_H
    width = MARGIN_L + n * CELL_W + 20
    height = MARGIN_T + n_ct * (panel_h + PANEL_GAP) + 20
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{MARGIN_L}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>',
    ]
    for i in range(n_ct):
        top = MARGIN_T + i * (panel_h + PANEL_GAP)
        out.append(f'<text x="4" y="{top + panel_h / 2 + 4:.1f}" font-family="sans-serif" font-size="11">CT {i + 1}</text>')
        for j in range(n_pt):
            y = top + j * CELL_H
            out.append(f'<text x="40" y="{y + CELL_H - 4}" font-family="sans-serif" font-size="9">PT {j + 1}</text>')
            for t in range(n):
                fill = _shade(q[i, j, t] / inst.flow_max) if w[i, j, t] else "#ffffff"
                out.append(f'<rect x="{MARGIN_L + t * CELL_W}" y="{y}" width="{CELL_W}" height="{CELL_H}" '
                           f'fill="{fill}" stroke="#cccccc" stroke-width="0.5"/>')
    axis_y = MARGIN_T + n_ct * (panel_h + PANEL_GAP) + 8
    for t in range(0, n, max(1, n // 10)):
        out.append(f'<text x="{MARGIN_L + t * CELL_W + 2}" y="{axis_y}" font-family="sans-serif" font-size="9">{t + 1}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(series: dict[str, np.ndarray], reference=None, title: str = "front",
                width: int = 520, height: int = 400) -> str:
    """Objective-space scatter (blend error vs. yield error) for named point sets."""
    pad = 55
    pts = [np.asarray(p, dtype=float).reshape(-1, 2) for p in series.values()]
    extra = [np.array([[reference.r1, reference.r2]])] if reference else []
    allp = np.vstack(pts + extra) if pts or extra else np.zeros((0, 2))
    if len(allp) == 0:
        allp = np.array([[0.0, 0.0], [1.0, 1.0]])
    lo = np.minimum(allp.min(axis=0), 0.0)
    hi = allp.max(axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)

    def sx(v):
        return pad + (v - lo[0]) / (hi[0] - lo[0]) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - lo[1]) / (hi[1] - lo[1]) * (height - 2 * pad)

    colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"]
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{pad}" y="20" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="#000000"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="#000000"/>',
        f'<text x="{width / 2:.1f}" y="{height - 15}" font-family="sans-serif" font-size="11">E_blend</text>',
        f'<text x="10" y="{height / 2:.1f}" font-family="sans-serif" font-size="11">E_yield</text>',
        f'<text x="{pad}" y="{height - pad + 14}" font-family="sans-serif" font-size="9">{lo[0]:.3g}</text>',
        f'<text x="{width - pad - 20}" y="{height - pad + 14}" font-family="sans-serif" font-size="9">{hi[0]:.3g}</text>',
        f'<text x="{pad - 40}" y="{pad + 4}" font-family="sans-serif" font-size="9">{hi[1]:.3g}</text>',
    ]
    if reference is not None:
        out.append(f'<rect x="{sx(0.0):.2f}" y="{sy(reference.r2):.2f}" width="{sx(reference.r1) - sx(0.0):.2f}" '
                   f'height="{sy(0.0) - sy(reference.r2):.2f}" fill="none" stroke="#999999" stroke-dasharray="4,3"/>')
    for k, (name, p) in enumerate(zip(series, pts)):
        color = colors[k % len(colors)]
        for a, b in p:
            out.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="3" fill="{color}" fill-opacity="0.8"/>')
        out.append(f'<text x="{width - pad - 90}" y="{pad + 14 * k}" font-family="sans-serif" font-size="10" '
                   f'fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(text: str, path) -> None:
    Path(path).write_text(text)
