"""Self-contained SVG figures: heatmaps, barycenter bands, scatter plots and transition diagrams.

Builders return a Figure (size plus SVG body elements); ``render`` wraps it
into a document and ``grid`` tiles several figures into one.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

RAMP_LOW = (0x2C, 0x3E, 0x9F)  # blue
RAMP_HIGH = (0xFD, 0xE7, 0x25)  # yellow
RAMP_STEPS = 256

_FONT = 'font-family="sans-serif"'


def ramp(value: float) -> str:
    """Hex color on the fixed blue to yellow ramp, quantized to 256 steps."""
    v = 0.0 if not np.isfinite(value) else min(1.0, max(0.0, float(value)))
    step = round(v * (RAMP_STEPS - 1)) / (RAMP_STEPS - 1)
    rgb = [round(lo + (hi - lo) * step) for lo, hi in zip(RAMP_LOW, RAMP_HIGH)]
    return "#" + "".join(f"{c:02x}" for c in rgb)


def _n(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


@dataclass(frozen=True)
class Figure:
    width: float
    height: float
    body: tuple[str, ...]


def _text(x, y, s, size=11, anchor="middle", extra="") -> str:
    return f'<text x="{_n(x)}" y="{_n(y)}" font-size="{size}" text-anchor="{anchor}" {_FONT}{extra}>{escape(str(s))}</text>'


def heatmap(values: np.ndarray, title: str = "", cell: float = 14.0, row_height: float = 4.0) -> Figure:
    """Rows are participants, columns rounds; values in [0, 1]."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    n, T = values.shape
    left, top = 30.0, 24.0
    body = [_text(left + T * cell / 2, 14, title, 12)] if title else []
    for i in range(n):
        for t in range(T):
            body.append(
                f'<rect x="{_n(left + t * cell)}" y="{_n(top + i * row_height)}" width="{_n(cell)}" '
                f'height="{_n(row_height)}" fill="{ramp(values[i, t])}"/>'
            )
    bottom = top + n * row_height
    for t in range(T):
        body.append(_text(left + (t + 0.5) * cell, bottom + 12, t + 1, 9))
    return Figure(left + T * cell + 10, bottom + 22, tuple(body))


def _polyline(xs, ys, stroke, width=1.5, dash="") -> str:
    pts = " ".join(f"{_n(x)},{_n(y)}" for x, y in zip(xs, ys))
    d = f' stroke-dasharray="{dash}"' if dash else ""
    return f'<polyline points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}"{d}/>'


def band_plot(
    lines: Sequence[tuple[str, np.ndarray, np.ndarray, np.ndarray, str]],
    title: str = "",
    width: float = 220.0,
    height: float = 140.0,
    markers: Sequence[float] = (),
) -> Figure:
    """Line plot on [0, 1] with shaded IQR bands.

    ``lines`` holds (label, center, low, high, color) tuples; ``markers``
    are 1-based rounds drawn as vertical ticks.
    """
    left, top, right, bottom = 34.0, 22.0, 10.0, 22.0
    pw, ph = width - left - right, height - top - bottom
    T = max(len(line[1]) for line in lines)

    def sx(t):
        return left + (t / max(T - 1, 1)) * pw

    def sy(v):
        return top + (1.0 - float(np.clip(v, 0, 1))) * ph

    body = [_text(width / 2, 14, title, 12)] if title else []
    body.append(f'<rect x="{_n(left)}" y="{_n(top)}" width="{_n(pw)}" height="{_n(ph)}" fill="none" stroke="#999"/>')
    for v in (0.0, 0.5, 1.0):
        body.append(_text(left - 4, sy(v) + 4, _n(v), 9, "end"))
    for label, center, low, high, color in lines:
        t = np.arange(len(center))
        upper = [f"{_n(sx(i))},{_n(sy(h))}" for i, h in zip(t, high)]
        lower = [f"{_n(sx(i))},{_n(sy(l))}" for i, l in zip(t[::-1], np.asarray(low)[::-1])]
        body.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" fill-opacity="0.25" stroke="none"/>')
        body.append(_polyline([sx(i) for i in t], [sy(c) for c in center], color))
    for i, (label, *_rest, color) in enumerate(lines):
        body.append(_text(left + 6, top + 12 + 12 * i, label, 9, "start", f' fill="{color}"'))
    for m in markers:
        x = sx(m - 1)
        body.append(f'<line x1="{_n(x)}" y1="{_n(top + ph)}" x2="{_n(x)}" y2="{_n(top + ph - 6)}" stroke="#c00" stroke-width="1"/>')
    for t in range(T):
        body.append(_text(sx(t), top + ph + 12, t + 1, 9))
    return Figure(width, height, tuple(body))


def scatter(
    points: Sequence[tuple[float, float, str, bool]],
    x_line: float,
    y_line: float,
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    x_range: tuple[float, float] = (-1.0, 1.0),
    y_range: tuple[float, float] = (0.0, 1.0),
    size: float = 220.0,
) -> Figure:
    """Labeled points (x, y, label, highlighted) with dashed criterion lines."""
    left, top, pad = 36.0, 22.0, 24.0
    pw = ph = size - left - pad

    def sx(x):
        return left + (x - x_range[0]) / (x_range[1] - x_range[0]) * pw

    def sy(y):
        return top + (1 - (y - y_range[0]) / (y_range[1] - y_range[0])) * ph

    body = [_text(size / 2, 14, title, 12)] if title else []
    body.append(f'<rect x="{_n(left)}" y="{_n(top)}" width="{_n(pw)}" height="{_n(ph)}" fill="none" stroke="#999"/>')
    body.append(_polyline([sx(x_line)] * 2, [top, top + ph], "#666", 1, "4 3"))
    body.append(_polyline([left, left + pw], [sy(y_line)] * 2, "#666", 1, "4 3"))
    for x, y, label, hot in points:
        color = "#d62728" if hot else "#1f4e9f"
        body.append(f'<circle cx="{_n(sx(x))}" cy="{_n(sy(y))}" r="4" fill="{color}"/>')
        body.append(_text(sx(x) + 6, sy(y) - 4, label, 9, "start"))
    body.append(_text(left + pw / 2, top + ph + 18, x_label, 10))
    body.append(_text(12, top + ph / 2, y_label, 10, "middle", f' transform="rotate(-90 12 {_n(top + ph / 2)})"'))
    return Figure(size, size + 6, tuple(body))


def transition_diagram(lam: np.ndarray, title: str = "", labels: Sequence[str] = ()) -> Figure:
    """Two-or-more-state transition diagram with probabilities on the edges."""
    lam = np.asarray(lam, dtype=float)
    K = lam.shape[0]
    width, height = 220.0, 140.0
    cx = np.linspace(50, width - 50, K) if K > 1 else np.array([width / 2])
    cy = height / 2 + 10
    labels = list(labels) or [f"I{k + 1}" for k in range(K)]
    body = [_text(width / 2, 14, title, 12)] if title else []
    body.append(
        '<defs><marker id="arrow" markerWidth="8" markerHeight="8" refX="7" refY="4" orient="auto">'
        '<path d="M0,0 L8,4 L0,8 z" fill="#444"/></marker></defs>'
    )
    for i in range(K):
        for j in range(K):
            p = lam[i, j]
            w = _n(0.5 + 3.5 * p)
            if i == j:
                x, y = cx[i], cy - 18
                body.append(
                    f'<path d="M{_n(x - 8)},{_n(y)} C{_n(x - 22)},{_n(y - 34)} {_n(x + 22)},{_n(y - 34)} {_n(x + 8)},{_n(y)}" '
                    f'fill="none" stroke="#444" stroke-width="{w}" marker-end="url(#arrow)"/>'
                )
                body.append(_text(x, y - 30, f"{p:.2f}", 9))
            else:
                bend = -14 if i < j else 14
                x1, x2 = cx[i] + (18 if i < j else -18), cx[j] + (-18 if i < j else 18)
                mx, my = (x1 + x2) / 2, cy + bend * 1.6
                body.append(
                    f'<path d="M{_n(x1)},{_n(cy + bend / 2)} Q{_n(mx)},{_n(my)} {_n(x2)},{_n(cy + bend / 2)}" '
                    f'fill="none" stroke="#444" stroke-width="{w}" marker-end="url(#arrow)"/>'
                )
                body.append(_text(mx, my + (10 if bend > 0 else -4), f"{p:.2f}", 9))
    for k in range(K):
        body.append(f'<circle cx="{_n(cx[k])}" cy="{_n(cy)}" r="16" fill="{ramp(1.0 - k / max(K - 1, 1))}" stroke="#333"/>')
        body.append(_text(cx[k], cy + 4, labels[k], 10))
    return Figure(width, height, tuple(body))


def grid(figures: Sequence[Figure], columns: int, gap: float = 10.0, title: str = "") -> Figure:
    """Tile figures row by row; each row is as tall as its tallest figure."""
    if columns < 1:
        raise ValueError("columns must be positive")
    body = [_text(10, 16, title, 14, "start")] if title else []
    y = 26.0 if title else 0.0
    width = 0.0
    for r in range(0, len(figures), columns):
        row = figures[r:r + columns]
        x = 0.0
        for fig in row:
            body.append(f'<g transform="translate({_n(x)},{_n(y)})">' + "".join(fig.body) + "</g>")
            x += fig.width + gap
        width = max(width, x - gap)
        y += max(f.height for f in row) + gap
    return Figure(width, y - gap if figures else y, tuple(body))


def stack(rows: Sequence[Figure], gap: float = 10.0, title: str = "") -> Figure:
    """Place already-composed rows under each other."""
    return grid(list(rows), 1, gap, title)


def render(fig: Figure, deterministic: bool = False) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{_n(fig.width)}" height="{_n(fig.height)}" viewBox="0 0 {_n(fig.width)} {_n(fig.height)}">'
    lines = ['<?xml version="1.0" encoding="UTF-8"?>']
    if not deterministic:
        lines.append(f"<!-- generated {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')} -->")
    lines.append(head)
    lines.append('<rect width="100%" height="100%" fill="white"/>')
    lines.extend(fig.body)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_svg(fig: Figure, path, deterministic: bool = False) -> None:
    Path(path).write_text(render(fig, deterministic))
