"""Minimal self-contained SVG line charts and heatmaps.

The plotted data is embedded as a comment table so that figures diff cleanly in version control.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 480, 320, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _data_comment(series: dict[str, tuple[Sequence[float], Sequence[float]]]) -> list[str]:
    lines = ["<!-- data"]
    for name, (xs, ys) in series.items():
        lines.append(f"series {name.replace('--', '-')}")
        lines.extend(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))
    lines.append("-->")
    return lines


def line_chart(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "", ylabel: str = "") -> str:
    """SVG text for one or more (x, y) series on shared linear axes."""
    xs = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in series.values()] or [np.zeros(1)])
    ys = np.concatenate([np.asarray(y, dtype=np.float64) for _, y in series.values()] or [np.zeros(1)])
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y0, y1 = (min(0.0, float(ys.min())), float(ys.max())) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    sx = lambda v: PAD + (v - x0) / (x1 - x0) * (WIDTH - 2 * PAD)  # noqa: E731
    sy = lambda v: HEIGHT - PAD - (v - y0) / (y1 - y0) * (HEIGHT - 2 * PAD)  # noqa: E731

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">']
    out += _data_comment(series)
    out.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    out.append(f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="black"/>')
    out.append(f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>')
    for v, anchor in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{sx(v):.2f}" y="{HEIGHT - PAD + 16}" font-size="10" text-anchor="{anchor}">{_fmt(v)}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{PAD - 4}" y="{sy(v):.2f}" font-size="10" text-anchor="end">{_fmt(v)}</text>')
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="{PAD / 2}" font-size="13" text-anchor="middle">{escape(title)}</text>')
    if xlabel:
        out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        out.append(f'<text x="12" y="{HEIGHT / 2}" font-size="11" text-anchor="middle" '
                   f'transform="rotate(-90 12 {HEIGHT / 2})">{escape(ylabel)}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{WIDTH - PAD}" y="{PAD + 14 * i}" font-size="10" fill="{color}" '
                   f'text-anchor="end">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heatmap(matrix: np.ndarray, labels: Sequence[str], title: str = "") -> str:
    """SVG grid for a row-normalized matrix with values in [0, 1]."""
    m = np.asarray(matrix, dtype=np.float64)
    k = m.shape[0]
    cell = (min(WIDTH, HEIGHT) - 2 * PAD) / max(k, 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">', "<!-- data"]
    out += [",".join(_fmt(v) for v in row) for row in m]
    out.append("-->")
    out.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="{PAD / 2}" font-size="13" text-anchor="middle">{escape(title)}</text>')
    for i in range(k):
        for j in range(m.shape[1]):
            shade = int(round(255 * (1.0 - min(max(m[i, j], 0.0), 1.0))))
            x, y = PAD + j * cell, PAD + i * cell
            out.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cell:.2f}" height="{cell:.2f}" '
                       f'fill="rgb({shade},{shade},255)" stroke="white"/>')
            out.append(f'<text x="{x + cell / 2:.2f}" y="{y + cell / 2 + 4:.2f}" font-size="9" '
                       f'text-anchor="middle">{m[i, j]:.2f}</text>')
        out.append(f'<text x="{PAD - 4}" y="{PAD + (i + 0.5) * cell + 4:.2f}" font-size="9" '
                   f'text-anchor="end">{escape(labels[i])}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(svg: str, path: str | Path) -> None:
    Path(path).write_text(svg)
