"""Minimal standalone SVG plotter (lines and scatters only).

Plots are conveniences rendered from already-written CSV data; they carry
no styling dependencies and the output bytes are deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .fileio import atomic_write_text

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
           "#17becf", "#7f7f7f"]
_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 36, 52


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi) or lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(abs(raw)))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


class SvgPlot:
    """Accumulates series and renders a fixed-size SVG chart."""

    def __init__(self, title: str = "", xlabel: str = "", ylabel: str = "",
                 logx: bool = False, logy: bool = False):
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.logx, self.logy = logx, logy
        self.series = []

    def add(self, label: str, xs, ys, marker: bool = False, line: bool = True):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        keep = np.isfinite(xs) & np.isfinite(ys)
        self.series.append((label, xs[keep], ys[keep], marker, line))
        return self

    def _transform(self, v, log):
        return np.log10(v) if log else v

    def render(self) -> str:
        xs_all = np.concatenate([s[1] for s in self.series if s[1].size]) \
            if self.series else np.array([0.0, 1.0])
        ys_all = np.concatenate([s[2] for s in self.series if s[2].size]) \
            if self.series else np.array([0.0, 1.0])
        tx = self._transform(xs_all, self.logx)
        ty = self._transform(ys_all, self.logy)
        x_lo, x_hi = float(tx.min()), float(tx.max())
        y_lo, y_hi = float(ty.min()), float(ty.max())
        if x_lo == x_hi:
            x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
        if y_lo == y_hi:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        pad_x = 0.04 * (x_hi - x_lo)
        pad_y = 0.06 * (y_hi - y_lo)
        x_lo, x_hi = x_lo - pad_x, x_hi + pad_x
        y_lo, y_hi = y_lo - pad_y, y_hi + pad_y

        def sx(v):
            return _ML + (v - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

        def sy(v):
            return _H - _MB - (v - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
            f'<rect width="{_W}" height="{_H}" fill="white"/>',
            f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" '
            f'height="{_H - _MT - _MB}" fill="none" stroke="#333"/>',
        ]
        if self.title:
            parts.append(f'<text x="{_W / 2}" y="22" text-anchor="middle" '
                         f'font-size="14">{self.title}</text>')
        for t in _ticks(x_lo + pad_x, x_hi - pad_x):
            label = _fmt(10.0 ** t) if self.logx else _fmt(t)
            parts.append(f'<line x1="{_fmt(sx(t))}" y1="{_H - _MB}" '
                         f'x2="{_fmt(sx(t))}" y2="{_H - _MB + 4}" stroke="#333"/>')
            parts.append(f'<text x="{_fmt(sx(t))}" y="{_H - _MB + 17}" '
                         f'text-anchor="middle">{label}</text>')
        for t in _ticks(y_lo + pad_y, y_hi - pad_y):
            label = _fmt(10.0 ** t) if self.logy else _fmt(t)
            parts.append(f'<line x1="{_ML - 4}" y1="{_fmt(sy(t))}" '
                         f'x2="{_ML}" y2="{_fmt(sy(t))}" stroke="#333"/>')
            parts.append(f'<text x="{_ML - 7}" y="{_fmt(sy(t) + 4)}" '
                         f'text-anchor="end">{label}</text>')
        if self.xlabel:
            parts.append(f'<text x="{_W / 2}" y="{_H - 14}" '
                         f'text-anchor="middle">{self.xlabel}</text>')
        if self.ylabel:
            parts.append(f'<text x="16" y="{_H / 2}" text-anchor="middle" '
                         f'transform="rotate(-90 16 {_H / 2})">{self.ylabel}</text>')

        for idx, (label, xs, ys, marker, line) in enumerate(self.series):
            color = _COLORS[idx % len(_COLORS)]
            px = [sx(v) for v in self._transform(xs, self.logx)]
            py = [sy(v) for v in self._transform(ys, self.logy)]
            if line and len(px) > 1:
                pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
                parts.append(f'<polyline points="{pts}" fill="none" '
                             f'stroke="{color}" stroke-width="1.5"/>')
            if marker or not line:
                for a, b in zip(px, py):
                    parts.append(f'<circle cx="{_fmt(a)}" cy="{_fmt(b)}" r="2.5" '
                                 f'fill="{color}" fill-opacity="0.7"/>')
            ly = _MT + 16 + 16 * idx
            parts.append(f'<line x1="{_W - _MR - 150}" y1="{ly - 4}" '
                         f'x2="{_W - _MR - 130}" y2="{ly - 4}" stroke="{color}" '
                         f'stroke-width="2"/>')
            parts.append(f'<text x="{_W - _MR - 125}" y="{ly}">{label}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.render())
