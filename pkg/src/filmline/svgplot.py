"""Tiny dependency-free SVG line plots with optional min/max bands.

Output is deterministic: identical inputs produce identical bytes. The data
behind every series is embedded as an XML comment so plots remain
self-describing.
"""

from __future__ import annotations

import numpy as np

_MARGIN = 56
_WIDTH = 720
_HEIGHT = 420
_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _fmt(v: float) -> str:
    return f"{float(v):.3f}"


class LinePlot:
    def __init__(self, title: str, xlabel: str, ylabel: str):
        self.title = title
        self.xlabel = xlabel
        self.ylabel = ylabel
        self.series = []      # (name, xs, ys)
        self.bands = []       # (name, xs, lo, hi)
        self.hlines = []      # (label, y, dashed)

    def add_series(self, name: str, xs, ys):
        self.series.append((name, np.asarray(xs, float), np.asarray(ys, float)))

    def add_band(self, name: str, xs, lo, hi):
        self.bands.append((name, np.asarray(xs, float), np.asarray(lo, float),
                           np.asarray(hi, float)))

    def add_hline(self, label: str, y: float, dashed: bool = True):
        self.hlines.append((label, float(y), dashed))

    def _ranges(self):
        xs = np.concatenate([s[1] for s in self.series] + [b[1] for b in self.bands])
        ys = np.concatenate([s[2] for s in self.series]
                            + [b[2] for b in self.bands] + [b[3] for b in self.bands]
                            + [np.array([h[1]]) for h in self.hlines])
        x_lo, x_hi = float(xs.min()), float(xs.max())
        y_lo, y_hi = float(ys.min()), float(ys.max())
        if x_hi == x_lo:
            x_hi = x_lo + 1.0
        pad = 0.05 * (y_hi - y_lo) or 1.0
        return x_lo, x_hi, y_lo - pad, y_hi + pad

    def render(self) -> str:
        x_lo, x_hi, y_lo, y_hi = self._ranges()
        iw = _WIDTH - 2 * _MARGIN
        ih = _HEIGHT - 2 * _MARGIN

        def px(x):
            return _MARGIN + (x - x_lo) / (x_hi - x_lo) * iw

        def py(y):
            return _HEIGHT - _MARGIN - (y - y_lo) / (y_hi - y_lo) * ih

        parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
            f'viewBox="0 0 {_WIDTH} {_HEIGHT}">',
            f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
            f'<text x="{_WIDTH / 2:.0f}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{self.title}</text>',
            f'<text x="{_WIDTH / 2:.0f}" y="{_HEIGHT - 12}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{self.xlabel}</text>',
            f'<text x="16" y="{_HEIGHT / 2:.0f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {_HEIGHT / 2:.0f})">{self.ylabel}</text>',
            f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{iw}" height="{ih}" '
            f'fill="none" stroke="#333" stroke-width="1"/>',
        ]

        for i in range(5):
            xv = x_lo + (x_hi - x_lo) * i / 4
            yv = y_lo + (y_hi - y_lo) * i / 4
            parts.append(f'<text x="{px(xv):.1f}" y="{_HEIGHT - _MARGIN + 16}" '
                         f'text-anchor="middle" font-family="sans-serif" font-size="10">'
                         f'{_fmt(xv)}</text>')
            parts.append(f'<text x="{_MARGIN - 6}" y="{py(yv):.1f}" text-anchor="end" '
                         f'font-family="sans-serif" font-size="10">{_fmt(yv)}</text>')

        for name, xs, lo, hi in self.bands:
            pts = [f"{px(x):.2f},{py(v):.2f}" for x, v in zip(xs, hi)]
            pts += [f"{px(x):.2f},{py(v):.2f}" for x, v in zip(xs[::-1], lo[::-1])]
            parts.append(f'<!-- band {name}: x={list(map(_fmt, xs))} '
                         f'lo={list(map(_fmt, lo))} hi={list(map(_fmt, hi))} -->')
            parts.append(f'<polygon points="{" ".join(pts)}" fill="#1f77b4" '
                         f'fill-opacity="0.15" stroke="none"/>')

        for label, y, dashed in self.hlines:
            dash = ' stroke-dasharray="6,4"' if dashed else ""
            parts.append(f'<line x1="{_MARGIN}" y1="{py(y):.2f}" x2="{_WIDTH - _MARGIN}" '
                         f'y2="{py(y):.2f}" stroke="#777" stroke-width="1"{dash}/>')
            parts.append(f'<text x="{_WIDTH - _MARGIN + 4}" y="{py(y):.1f}" '
                         f'font-family="sans-serif" font-size="9" fill="#555">{label}</text>')

        for i, (name, xs, ys) in enumerate(self.series):
            color = _COLORS[i % len(_COLORS)]
            pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
            parts.append(f'<!-- series {name}: x={list(map(_fmt, xs))} '
                         f'y={list(map(_fmt, ys))} -->')
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                         f'stroke-width="1.6"/>')
            parts.append(f'<text x="{_MARGIN + 8}" y="{_MARGIN + 16 + 14 * i}" '
                         f'font-family="sans-serif" font-size="11" fill="{color}">{name}</text>')

        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.render())
