"""Self-contained SVG line charts plus the CSV tables behind them."""
from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 480, 320
_LEFT, _RIGHT, _TOP, _BOTTOM = 60, 20, 30, 50


def _fmt(v):
    return f"{v:.4g}"


def _span(values):
    lo, hi = min(values), max(values)
    if hi == lo:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    return lo, hi


def line_chart_svg(series: dict, title="", xlabel="", ylabel="", xticks=None) -> str:
    """One polyline per entry of ``series`` (name -> list of (x, y)), in insertion order."""
    pts = [p for s in series.values() for p in s]
    if not pts:
        raise ValueError("line chart needs at least one point")
    x0, x1 = _span([p[0] for p in pts])
    y0, y1 = _span([p[1] for p in pts])
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def sx(x):
        return _LEFT + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return _TOP + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}">',
           f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
           f'<text x="{_W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{_LEFT}" y1="{_TOP + ph}" x2="{_LEFT + pw}" y2="{_TOP + ph}" '
           'stroke="black"/>',
           f'<line x1="{_LEFT}" y1="{_TOP}" x2="{_LEFT}" y2="{_TOP + ph}" stroke="black"/>']
    ticks = xticks if xticks is not None else sorted({p[0] for p in pts})
    for x in ticks:
        out.append(f'<text x="{sx(x):.2f}" y="{_TOP + ph + 16}" text-anchor="middle" '
                   f'font-size="10">{_fmt(x)}</text>')
    for i in range(5):
        y = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{_LEFT - 6}" y="{sy(y) + 3:.2f}" text-anchor="end" '
                   f'font-size="10">{_fmt(y)}</text>')
    out.append(f'<text x="{_LEFT + pw / 2}" y="{_H - 12}" text-anchor="middle" '
               f'font-size="11">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{_TOP + ph / 2}" text-anchor="middle" font-size="11" '
               f'transform="rotate(-90 14 {_TOP + ph / 2})">{escape(ylabel)}</text>')
    for i, (name, s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in s)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                   f'points="{coords}"><title>{escape(str(name))}</title></polyline>')
        out.append(f'<text x="{_LEFT + pw - 4}" y="{_TOP + 14 * (i + 1)}" text-anchor="end" '
                   f'font-size="11" fill="{color}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def table_csv(rows: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
