"""Minimal SVG scatter, line and box renderings for the CLI's figure outputs."""
from __future__ import annotations

import math
from typing import Dict, List, Sequence, Tuple
from xml.sax.saxutils import escape

WIDTH, HEIGHT, PAD = 480, 360, 48
COLOURS = ("#1f5fa8", "#c0392b", "#2e8b57", "#8e44ad", "#d35400")


def _finite(vals) -> List[float]:
    return [float(v) for v in vals if v is not None and math.isfinite(float(v))]


def _scale(lo: float, hi: float, a: float, b: float):
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lambda v: a + (v - lo) / (hi - lo) * (b - a)


def _frame(title: str, xlabel: str, ylabel: str, lo_hi: Tuple[float, float, float, float]) -> List[str]:
    x0, x1, y0, y1 = lo_hi
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD / 2}" y2="{HEIGHT - PAD}" stroke="black"/>',
           f'<line x1="{PAD}" y1="{PAD / 2}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
           f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
           f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
           f'<text x="{PAD}" y="{HEIGHT - PAD + 14}" text-anchor="middle">{x0:.3g}</text>',
           f'<text x="{WIDTH - PAD / 2}" y="{HEIGHT - PAD + 14}" text-anchor="middle">{x1:.3g}</text>',
           f'<text x="{PAD - 4}" y="{HEIGHT - PAD}" text-anchor="end">{y0:.3g}</text>',
           f'<text x="{PAD - 4}" y="{PAD / 2 + 4}" text-anchor="end">{y1:.3g}</text>']
    return out


def _bounds(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float, float, float]:
    fx, fy = _finite(xs) or [0.0], _finite(ys) or [0.0]
    return min(fx), max(fx), min(fy), max(fy)


def scatter_svg(xs: Sequence[float], ys: Sequence[float], path, title: str = "",
                xlabel: str = "", ylabel: str = "", diagonal: bool = True) -> None:
    x0, x1, y0, y1 = _bounds(xs, ys)
    if diagonal:
        x0 = y0 = min(x0, y0)
        x1 = y1 = max(x1, y1)
    sx = _scale(x0, x1, PAD, WIDTH - PAD / 2)
    sy = _scale(y0, y1, HEIGHT - PAD, PAD / 2)
    parts = _frame(title, xlabel, ylabel, (x0, x1, y0, y1))
    if diagonal:
        parts.append(f'<line x1="{sx(x0):.1f}" y1="{sy(y0):.1f}" x2="{sx(x1):.1f}" y2="{sy(y1):.1f}" '
                     'stroke="#999" stroke-dasharray="4 3"/>')
    for x, y in zip(xs, ys):
        if math.isfinite(x) and math.isfinite(y):
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" fill="{COLOURS[0]}" '
                         'fill-opacity="0.7"/>')
    parts.append("</svg>")
    _write(path, parts)


def line_svg(series: Dict[str, Tuple[Sequence[float], Sequence[float]]], path, title: str = "",
             xlabel: str = "", ylabel: str = "") -> None:
    allx = [v for xs, _ in series.values() for v in xs]
    ally = [v for _, ys in series.values() for v in ys]
    x0, x1, y0, y1 = _bounds(allx, ally)
    sx = _scale(x0, x1, PAD, WIDTH - PAD / 2)
    sy = _scale(y0, y1, HEIGHT - PAD, PAD / 2)
    parts = _frame(title, xlabel, ylabel, (x0, x1, y0, y1))
    for k, (name, (xs, ys)) in enumerate(series.items()):
        colour = COLOURS[k % len(COLOURS)]
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys)
                       if math.isfinite(x) and math.isfinite(y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        parts.append(f'<text x="{WIDTH - PAD}" y="{PAD / 2 + 14 * (k + 1)}" fill="{colour}" '
                     f'text-anchor="end">{escape(name)}</text>')
    parts.append("</svg>")
    _write(path, parts)


def box_svg(boxes: Sequence[Tuple[str, Sequence[float]]], path, title: str = "",
            ylabel: str = "") -> None:
    """One box per (label, [min, q1, median, q3, max])."""
    ally = [v for _, q in boxes for v in q]
    _, _, y0, y1 = _bounds([0.0], ally)
    sy = _scale(y0, y1, HEIGHT - PAD, PAD / 2)
    parts = _frame(title, "", ylabel, (0, len(boxes), y0, y1))
    step = (WIDTH - 1.5 * PAD) / max(len(boxes), 1)
    for i, (label, q) in enumerate(boxes):
        cx = PAD + step * (i + 0.5)
        half = step * 0.3
        lo, q1, med, q3, hi = (sy(v) for v in q)
        parts += [f'<line x1="{cx:.1f}" y1="{lo:.1f}" x2="{cx:.1f}" y2="{hi:.1f}" stroke="black"/>',
                  f'<rect x="{cx - half:.1f}" y="{q3:.1f}" width="{2 * half:.1f}" '
                  f'height="{max(q1 - q3, 0.5):.1f}" fill="#dde8f5" stroke="black"/>',
                  f'<line x1="{cx - half:.1f}" y1="{med:.1f}" x2="{cx + half:.1f}" y2="{med:.1f}" '
                  'stroke="#c0392b" stroke-width="2"/>',
                  f'<text x="{cx:.1f}" y="{HEIGHT - PAD + 14}" text-anchor="middle" '
                  f'font-size="9">{escape(label)}</text>']
    parts.append("</svg>")
    _write(path, parts)


def _write(path, parts: List[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(parts) + "\n")
