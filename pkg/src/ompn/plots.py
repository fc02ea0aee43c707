"""Dependency-free SVG plots of expansion traces.

Output is plain text with fixed number formatting, so the same inputs always
give byte-identical files.
"""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

SLOT_COLOURS = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")
ACTION_LABELS = ("u", "d", "l", "r", "U", "D")  # up, down, left, right, use, done

W_STEP = 18.0
H_PLOT = 120.0
MARGIN = 30.0


def _n(v: float) -> str:
    return f"{v:.2f}"


def _header(width: float, height: float) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_n(width)}" height="{_n(height)}" '
        f'viewBox="0 0 {_n(width)} {_n(height)}" font-family="monospace" font-size="9">',
        f'<rect x="0" y="0" width="{_n(width)}" height="{_n(height)}" fill="white"/>',
    ]


def _x(t: float) -> float:
    return MARGIN + t * W_STEP


def _ticks(T: int, labels: Sequence[str] | None, y0: float) -> list[str]:
    out = ['<g class="xticks">']
    for t in range(T):
        x = _x(t + 0.5)
        out.append(f'<line class="xtick" x1="{_n(x)}" y1="{_n(y0)}" x2="{_n(x)}" y2="{_n(y0 + 3)}" stroke="black"/>')
        text = str(t) if labels is None else labels[t]
        out.append(f'<text x="{_n(x)}" y="{_n(y0 + 12)}" text-anchor="middle">{escape(text)}</text>')
    out.append("</g>")
    return out


def _markers(positions: Sequence[int], cls: str, y_top: float, y_bot: float, colour: str) -> list[str]:
    out = [f'<g class="{cls}">']
    for b in positions:
        x = _x(b + 1)  # a boundary closes step b
        out.append(f'<line x1="{_n(x)}" y1="{_n(y_top)}" x2="{_n(x)}" y2="{_n(y_bot)}" stroke="{colour}" stroke-width="1.5"/>')
    out.append("</g>")
    return out


def _action_labels(actions: Sequence[int] | None, T: int) -> list[str] | None:
    if actions is None:
        return None
    return [ACTION_LABELS[a] if 0 <= a < len(ACTION_LABELS) else str(a) for a in list(actions)[:T]]


def expansion_svg(
    pi: np.ndarray,
    actions: Sequence[int] | None = None,
    gt_boundaries: Sequence[int] = (),
    pred_boundaries: Sequence[int] = (),
    title: str = "",
) -> str:
    """Step plot of the expansion distribution: one stacked band per slot.

    ``pi`` is (T, n); slot 0 is drawn at the bottom.  Ground-truth boundaries
    are drawn as arrows above the plot, predictions as dashed lines.
    """
    pi = np.atleast_2d(np.asarray(pi, dtype=np.float64))
    if pi.size == 0:
        raise ValueError("expansion_svg: empty trace")
    T, n = pi.shape
    width, height = _x(T) + MARGIN, H_PLOT + 3 * MARGIN
    top, bottom = MARGIN * 1.5, MARGIN * 1.5 + H_PLOT
    out = _header(width, height)
    if title:
        out.append(f'<text x="{_n(MARGIN)}" y="12">{escape(title)}</text>')
    cum = np.zeros(T)
    for i in range(n):
        out.append(f'<g class="band" data-slot="{i + 1}" fill="{SLOT_COLOURS[i % len(SLOT_COLOURS)]}">')
        for t in range(T):
            h = pi[t, i] * H_PLOT
            y = bottom - (cum[t] * H_PLOT) - h
            out.append(f'<rect x="{_n(_x(t))}" y="{_n(y)}" width="{_n(W_STEP)}" height="{_n(h)}"/>')
        out.append("</g>")
        cum += pi[:, i]
    out.append(f'<rect x="{_n(_x(0))}" y="{_n(top)}" width="{_n(T * W_STEP)}" height="{_n(H_PLOT)}" fill="none" stroke="black"/>')
    out += _ticks(T, _action_labels(actions, T), bottom)
    out.append('<g class="gt">')
    for b in gt_boundaries:
        x = _x(b + 0.5)
        out.append(f'<path d="M{_n(x)},{_n(top - 14)} L{_n(x)},{_n(top - 3)} M{_n(x - 3)},{_n(top - 7)} L{_n(x)},{_n(top - 3)} L{_n(x + 3)},{_n(top - 7)}" stroke="black" fill="none"/>')
    out.append("</g>")
    out += [ln.replace("stroke-width", 'stroke-dasharray="3,2" stroke-width') for ln in _markers(pred_boundaries, "pred", top, bottom, "black")]
    out.append("</svg>")
    return "\n".join(out) + "\n"


def threshold_svg(
    standardized: Sequence[float],
    upper: float,
    lower: float,
    final: float,
    gt_boundaries: Sequence[int] = (),
    pred_boundaries: Sequence[int] = (),
    title: str = "",
) -> str:
    """Standardised expected expansion position with the three threshold lines."""
    s = np.asarray(standardized, dtype=np.float64)
    if s.size == 0:
        raise ValueError("threshold_svg: empty trace")
    T = len(s)
    width, height = _x(T) + MARGIN, H_PLOT + 3 * MARGIN
    top, bottom = MARGIN * 1.5, MARGIN * 1.5 + H_PLOT
    yv = lambda v: bottom - v * H_PLOT
    out = _header(width, height)
    if title:
        out.append(f'<text x="{_n(MARGIN)}" y="12">{escape(title)}</text>')
    out.append(f'<rect x="{_n(_x(0))}" y="{_n(top)}" width="{_n(T * W_STEP)}" height="{_n(H_PLOT)}" fill="none" stroke="black"/>')
    pts = " ".join(f"{_n(_x(t + 0.5))},{_n(yv(v))}" for t, v in enumerate(s))
    out.append(f'<polyline class="signal" points="{pts}" fill="none" stroke="#4c72b0" stroke-width="1.5"/>')
    out.append('<g class="thresholds">')
    for name, v, colour in (("upper", upper, "#c44e52"), ("lower", lower, "#55a868"), ("final", final, "black")):
        out.append(f'<line class="threshold" data-kind="{name}" x1="{_n(_x(0))}" y1="{_n(yv(v))}" x2="{_n(_x(T))}" y2="{_n(yv(v))}" stroke="{colour}"/>')
    out.append("</g>")
    out += _ticks(T, None, bottom)
    out += _markers(gt_boundaries, "gt", top, bottom, "#999999")
    out += [ln.replace("stroke-width", 'stroke-dasharray="3,2" stroke-width') for ln in _markers(pred_boundaries, "pred", top, bottom, "black")]
    out.append("</svg>")
    return "\n".join(out) + "\n"

