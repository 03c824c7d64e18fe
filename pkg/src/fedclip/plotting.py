"""Static SVG line charts of trajectory CSVs.

Output is a pure function of the input rows: fixed canvas, fixed number
formatting, no timestamps.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

from fedclip.algorithms import TRAJECTORY_COLUMNS
from fedclip.core import FedClipError

__all__ = ["read_series", "render_svg", "emit_plots", "COMPARE_COLUMNS"]

COMPARE_COLUMNS = ("label", "algorithm") + TRAJECTORY_COLUMNS
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f")
_PANELS = ("loss", "grad_norm")
_W, _H = 960, 380
_PANEL_W, _PANEL_H = 400, 270
_MARGIN_L, _MARGIN_T = 70, 40


def read_series(path) -> dict[str, dict[str, list[float]]]:
    """Load a trajectory or compare CSV into ``{label: {column: values}}``."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FedClipError(f"{path}: empty file")
    header = tuple(rows[0])
    if header not in (TRAJECTORY_COLUMNS, COMPARE_COLUMNS):
        unknown = sorted(set(header) - set(COMPARE_COLUMNS))
        raise FedClipError(f"{path}: unexpected columns {unknown or list(header)}; "
                           f"expected {list(TRAJECTORY_COLUMNS)}")
    body = rows[1:]
    if not body:
        raise FedClipError(f"{path}: no data rows")
    series: dict[str, dict[str, list[float]]] = {}
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise FedClipError(f"{path}: line {lineno}: expected {len(header)} fields")
        rec = dict(zip(header, row))
        label = rec.get("label", "trajectory")
        s = series.setdefault(label, {c: [] for c in ("round",) + _PANELS})
        try:
            for c in ("round",) + _PANELS:
                s[c].append(float(rec[c]))
        except ValueError:
            raise FedClipError(f"{path}: line {lineno}: non-numeric value") from None
    return series


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == 0:
        return "0"
    if abs(v) >= 1e4 or abs(v) < 1e-3:
        return f"{v:.2e}"
    return f"{v:.4g}"


def _range(values):
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if hi == lo:
        pad = abs(lo) * 0.05 or 1.0
        return lo - pad, hi + pad
    return lo, hi


def _panel(series, column: str, x_off: float) -> list[str]:
    out = []
    xs = [x for s in series.values() for x in s["round"]]
    ys = [y for s in series.values() for y in s[column]]
    x_lo, x_hi = _range(xs)
    y_lo, y_hi = _range(ys)

    def px(x):
        return x_off + (x - x_lo) / (x_hi - x_lo) * _PANEL_W

    def py(y):
        return _MARGIN_T + _PANEL_H - (y - y_lo) / (y_hi - y_lo) * _PANEL_H

    out.append(f'<rect x="{_fmt(x_off)}" y="{_MARGIN_T}" width="{_PANEL_W}" height="{_PANEL_H}" '
               'fill="none" stroke="#333" stroke-width="1"/>')
    out.append(f'<text x="{_fmt(x_off + _PANEL_W / 2)}" y="{_MARGIN_T - 12}" text-anchor="middle" '
               f'font-size="14">{escape(column)} vs round</text>')
    for k in range(5):
        fx = x_lo + (x_hi - x_lo) * k / 4
        fy = y_lo + (y_hi - y_lo) * k / 4
        out.append(f'<text x="{_fmt(px(fx))}" y="{_MARGIN_T + _PANEL_H + 16}" text-anchor="middle" '
                   f'font-size="10">{_tick_label(fx)}</text>')
        out.append(f'<text x="{_fmt(x_off - 6)}" y="{_fmt(py(fy) + 3)}" text-anchor="end" '
                   f'font-size="10">{_tick_label(fy)}</text>')
    for i, (label, s) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(s["round"], s[column]) if math.isfinite(y)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{" ".join(pts)}"><title>{escape(label)}</title></polyline>')
    return out


def render_svg(series: dict[str, dict[str, list[float]]]) -> str:
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    for j, col in enumerate(_PANELS):
        parts.extend(_panel(series, col, _MARGIN_L + j * (_PANEL_W + 80)))
    y = _MARGIN_T + _PANEL_H + 36
    for i, label in enumerate(series):
        x = _MARGIN_L + (i % 4) * 210
        yy = y + (i // 4) * 16
        color = _PALETTE[i % len(_PALETTE)]
        parts.append(f'<line x1="{x}" y1="{yy - 4}" x2="{x + 20}" y2="{yy - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x + 26}" y="{yy}" font-size="11">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plots(csv_path, out_path=None) -> Path:
    """Render ``csv_path`` to an SVG next to it (or at ``out_path``)."""
    csv_path = Path(csv_path)
    svg = render_svg(read_series(csv_path))
    out = Path(out_path) if out_path is not None else csv_path.with_suffix(".svg")
    out.write_text(svg)
    return out
