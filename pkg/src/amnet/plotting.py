"""Dependency-free SVG emission for loss curves and study bar charts."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

_WIDTH, _HEIGHT = 640, 400
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70, 20, 40, 60
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _nice_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / target
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-12:
        ticks.append(round(v, 10))
        v += step
    return ticks


class _Svg:
    def __init__(self, width=_WIDTH, height=_HEIGHT):
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
            f'<rect width="{width}" height="{height}" fill="white"/>']

    def line(self, x1, y1, x2, y2, color="#333", width=1.0):
        self.parts.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                          f'stroke="{color}" stroke-width="{width}"/>')

    def polyline(self, points, color, width=1.8):
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
        self.parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                          f'stroke-width="{width}"/>')

    def rect(self, x, y, w, h, color):
        self.parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" '
                          f'fill="{color}"/>')

    def text(self, x, y, content, anchor="middle", size=12, rotate=None, color="#000"):
        transform = f' transform="rotate({rotate} {x:.2f} {y:.2f})"' if rotate else ""
        self.parts.append(f'<text x="{x:.2f}" y="{y:.2f}" text-anchor="{anchor}" '
                          f'font-size="{size}" fill="{color}"{transform}>{escape(str(content))}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"])


def _y_scale(values, zero_floor=False):
    lo = 0.0 if zero_floor else min(values)
    hi = max(values)
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return (lo if zero_floor else lo - pad), hi + pad


def line_chart(series: dict[str, tuple[list[float], list[float]]], title: str,
               xlabel: str, ylabel: str) -> str:
    """Multi-series line chart; series maps name -> (xs, ys)."""
    svg = _Svg()
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B
    all_x = [x for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = _y_scale(all_y)

    def px(x):
        return _MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y):
        return _MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    for tick in _nice_ticks(y_lo, y_hi):
        svg.line(_MARGIN_L, py(tick), _WIDTH - _MARGIN_R, py(tick), color="#ddd")
        svg.text(_MARGIN_L - 6, py(tick) + 4, f"{tick:g}", anchor="end", size=11)
    for tick in _nice_ticks(x_lo, x_hi):
        svg.text(px(tick), _HEIGHT - _MARGIN_B + 16, f"{tick:g}", size=11)
    svg.line(_MARGIN_L, _MARGIN_T, _MARGIN_L, _HEIGHT - _MARGIN_B)
    svg.line(_MARGIN_L, _HEIGHT - _MARGIN_B, _WIDTH - _MARGIN_R, _HEIGHT - _MARGIN_B)

    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        svg.polyline([(px(x), py(y)) for x, y in zip(xs, ys)], color)
        svg.text(_WIDTH - _MARGIN_R - 6, _MARGIN_T + 16 * (i + 1), name,
                 anchor="end", size=12, color=color)

    svg.text(_WIDTH / 2, 22, title, size=15)
    svg.text(_WIDTH / 2, _HEIGHT - 18, xlabel)
    svg.text(18, _HEIGHT / 2, ylabel, rotate=-90)
    return svg.render()


def bar_chart(labels: list[str], values: list[float], errors=None, title: str = "",
              ylabel: str = "") -> str:
    """Single-series bar chart with optional symmetric error whiskers."""
    svg = _Svg()
    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B
    errors = list(errors) if errors is not None else [0.0] * len(values)
    y_lo, y_hi = _y_scale([v + e for v, e in zip(values, errors)] + [0.0], zero_floor=True)

    def py(y):
        return _MARGIN_T + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h

    for tick in _nice_ticks(y_lo, y_hi):
        svg.line(_MARGIN_L, py(tick), _WIDTH - _MARGIN_R, py(tick), color="#ddd")
        svg.text(_MARGIN_L - 6, py(tick) + 4, f"{tick:g}", anchor="end", size=11)

    slot = plot_w / max(len(values), 1)
    bar_w = slot * 0.6
    for i, (label, value, err) in enumerate(zip(labels, values, errors)):
        x = _MARGIN_L + i * slot + (slot - bar_w) / 2
        svg.rect(x, py(value), bar_w, py(0) - py(value), _COLORS[0])
        if err > 0:
            cx = x + bar_w / 2
            svg.line(cx, py(value - err), cx, py(value + err), color="#333", width=1.5)
            svg.line(cx - 4, py(value + err), cx + 4, py(value + err), color="#333", width=1.5)
            svg.line(cx - 4, py(value - err), cx + 4, py(value - err), color="#333", width=1.5)
        svg.text(x + bar_w / 2, _HEIGHT - _MARGIN_B + 16, label, size=10, rotate=None)

    svg.line(_MARGIN_L, _MARGIN_T, _MARGIN_L, _HEIGHT - _MARGIN_B)
    svg.line(_MARGIN_L, py(0), _WIDTH - _MARGIN_R, py(0))
    svg.text(_WIDTH / 2, 22, title, size=15)
    svg.text(18, _HEIGHT / 2, ylabel, rotate=-90)
    return svg.render()
