"""Line charts rendered straight to SVG text from the CSV exports.

Output depends only on the input bytes and labels: no clocks, no fonts
probed, fixed number formatting.
"""
from __future__ import annotations

import csv
import io
from xml.sax.saxutils import escape

import numpy as np

from .control import GAIN_NAMES
from .errors import SchemaError
from .optimize import LEARNING_CURVE_COLUMNS
from .sim import TRAJECTORY_COLUMNS

GAIN_COLUMNS = ("step",) + GAIN_NAMES
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

PANEL_W, PANEL_H = 420, 200
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 30, 35

# (title, y column, optional dashed reference column)
TRAJECTORY_PANELS = (
    ("C_B [mol/m3]", "c_b", "cb_sp"),
    ("V [m3]", "vol", "v_sp"),
    ("T [K]", "temp", None),
    ("T_c [K]", "t_c", None),
    ("F_in [m3/min]", "f_in", None),
)


def read_columns(data, required, source="<csv>"):
    """Parse CSV bytes/text into float columns; missing columns raise SchemaError."""
    text = data.decode() if isinstance(data, bytes) else data
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError(f"{source}: empty CSV")
    header = rows[0]
    for col in required:
        if col not in header:
            raise SchemaError(f"{source}: missing column '{col}'")
    out = {}
    for col in required:
        j = header.index(col)
        out[col] = np.array([float(r[j]) if r[j] != "" else np.nan for r in rows[1:]])
    return out


def detect_kind(data):
    text = data.decode() if isinstance(data, bytes) else data
    header = tuple(next(csv.reader(io.StringIO(text)), ()))
    if header[:1] == ("iteration",):
        return "learning"
    if set(GAIN_NAMES) <= set(header):
        return "gains"
    return "trajectory"


def _fmt(v):
    return f"{v:.2f}"


def _ticks(lo, hi, n=5):
    return np.linspace(lo, hi, n)


def _panel(x0, y0, title, series, xlabel):
    """One axes box; ``series`` is a list of ``(x, y, color, dashed, label)``."""
    xs = np.concatenate([s[0] for s in series])
    ys = np.concatenate([s[1][np.isfinite(s[1])] for s in series])
    x_lo, x_hi = float(np.min(xs)), float(np.max(xs))
    y_lo, y_hi = (float(np.min(ys)), float(np.max(ys))) if ys.size else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    w = PANEL_W - MARGIN_L - MARGIN_R
    h = PANEL_H - MARGIN_T - MARGIN_B
    ox, oy = x0 + MARGIN_L, y0 + MARGIN_T

    def px(x):
        return ox + (x - x_lo) / (x_hi - x_lo) * w

    def py(y):
        return oy + h - (y - y_lo) / (y_hi - y_lo) * h

    parts = [
        f'<rect x="{_fmt(ox)}" y="{_fmt(oy)}" width="{w}" height="{h}" fill="none" '
        f'stroke="#444"/>',
        f'<text x="{_fmt(ox + w / 2)}" y="{_fmt(y0 + 18)}" text-anchor="middle" '
        f'font-size="13">{escape(title)}</text>',
        f'<text x="{_fmt(ox + w / 2)}" y="{_fmt(oy + h + 30)}" text-anchor="middle" '
        f'font-size="11">{escape(xlabel)}</text>',
    ]
    for t in _ticks(y_lo + pad, y_hi - pad):
        parts.append(f'<text x="{_fmt(ox - 5)}" y="{_fmt(py(t) + 4)}" text-anchor="end" '
                     f'font-size="10">{t:.4g}</text>')
        parts.append(f'<line x1="{_fmt(ox)}" y1="{_fmt(py(t))}" x2="{_fmt(ox + w)}" '
                     f'y2="{_fmt(py(t))}" stroke="#ddd"/>')
    for t in _ticks(x_lo, x_hi):
        parts.append(f'<text x="{_fmt(px(t))}" y="{_fmt(oy + h + 14)}" text-anchor="middle" '
                     f'font-size="10">{t:.4g}</text>')
    for x, y, color, dashed, label in series:
        ok = np.isfinite(y)
        pts = " ".join(f"{_fmt(px(a))},{_fmt(py(b))}" for a, b in zip(x[ok], y[ok]))
        dash = ' stroke-dasharray="5,3"' if dashed else ""
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"{dash}><title>{escape(label)}</title></polyline>')
    return parts


def _legend(x0, y0, labels):
    parts = []
    for i, label in enumerate(labels):
        y = y0 + 16 * i
        color = PALETTE[i % len(PALETTE)]
        parts.append(f'<line x1="{x0}" y1="{y}" x2="{x0 + 20}" y2="{y}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{x0 + 26}" y="{y + 4}" font-size="11">{escape(label)}</text>')
    return parts


def _document(panels, labels, n_cols=2):
    n_rows = -(-len(panels) // n_cols)
    legend_h = 16 * len(labels) + 10
    width, height = n_cols * PANEL_W, n_rows * PANEL_H + legend_h
    body = []
    for k, (title, series, xlabel) in enumerate(panels):
        body += _panel((k % n_cols) * PANEL_W, (k // n_cols) * PANEL_H, title, series, xlabel)
    body += _legend(MARGIN_L, n_rows * PANEL_H + 10, labels)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def trajectory_svg(inputs):
    """States, setpoints and actions; ``inputs`` is a list of ``(label, csv_bytes)``."""
    cols = [read_columns(data, TRAJECTORY_COLUMNS, label) for label, data in inputs]
    panels = []
    for title, ycol, refcol in TRAJECTORY_PANELS:
        series = []
        for i, ((label, _), c) in enumerate(zip(inputs, cols)):
            series.append((c["time_min"], c[ycol], PALETTE[i % len(PALETTE)], False, label))
        if refcol is not None:
            series.append((cols[0]["time_min"], cols[0][refcol], "#000", True, "setpoint"))
        panels.append((title, series, "time [min]"))
    return _document(panels, [label for label, _ in inputs])


def gains_svg(inputs):
    cols = [read_columns(data, GAIN_COLUMNS, label) for label, data in inputs]
    panels = []
    for name in GAIN_NAMES:
        series = [(c["step"], c[name], PALETTE[i % len(PALETTE)], False, label)
                  for i, ((label, _), c) in enumerate(zip(inputs, cols))]
        panels.append((name, series, "step"))
    return _document(panels, [label for label, _ in inputs])


def learning_curve_svg(inputs):
    cols = [read_columns(data, LEARNING_CURVE_COLUMNS[:4], label) for label, data in inputs]
    series = [(c["iteration"], c["best_fitness"], PALETTE[i % len(PALETTE)], False, label)
              for i, ((label, _), c) in enumerate(zip(inputs, cols))]
    return _document([("best fitness", series, "iteration")], [label for label, _ in inputs],
                     n_cols=1)


RENDERERS = {"trajectory": trajectory_svg, "gains": gains_svg, "learning": learning_curve_svg}


def render(inputs, kind=None):
    """Render overlaid series from several CSVs of one kind (detected from the first header)."""
    if not inputs:
        raise ValueError("no inputs to plot")
    kind = detect_kind(inputs[0][1]) if kind is None else kind
    if kind not in RENDERERS:
        raise ValueError(f"unknown plot kind '{kind}'")
    return RENDERERS[kind](inputs)
