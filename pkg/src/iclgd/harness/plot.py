"""Minimal SVG rendering of emitted CSVs (line traces and y=x scatter plots)."""

import csv
import math
import os
from xml.sax.saxutils import escape

W, H, PAD = 480, 360, 50
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"]


class CsvFormatError(ValueError):
    pass


def read_numeric_csv(path):
    """Return (header, columns) with every data cell parsed as float.

    Empty cells become NaN; anything else unparsable raises CsvFormatError
    naming the 1-based line number.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(rows[0]):
        raise CsvFormatError(f"{path}: empty CSV")
    header = rows[0]
    data = [[] for _ in header]
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        for j, cell in enumerate(row):
            try:
                data[j].append(float(cell) if cell != "" else math.nan)
            except ValueError:
                raise CsvFormatError(f"{path}: line {lineno}: non-numeric value {cell!r}") from None
    if not data[0]:
        raise CsvFormatError(f"{path}: no data rows")
    return header, data


def _bounds(values):
    vals = [v for v in values if math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


class _Frame:
    def __init__(self, xr, yr):
        self.x0, self.x1 = xr
        self.y0, self.y1 = yr

    def px(self, x):
        return PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2 * PAD)

    def py(self, y):
        return H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2 * PAD)


def _axes(frame, xlabel, ylabel, title):
    out = [
        f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" height="{H - 2 * PAD}" '
        'fill="none" stroke="#444"/>',
        f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    for v, anchor in ((frame.x0, "start"), (frame.x1, "end")):
        out.append(f'<text x="{frame.px(v):.1f}" y="{H - PAD + 14}" text-anchor="{anchor}" '
                   f'font-size="10">{v:.4g}</text>')
    for v in (frame.y0, frame.y1):
        out.append(f'<text x="{PAD - 4}" y="{frame.py(v):.1f}" text-anchor="end" '
                   f'font-size="10">{v:.4g}</text>')
    return out


def _doc(body):
    return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}">\n' + "\n".join(body) + "\n</svg>\n")


def line_svg(x, series, xlabel="step", title=""):
    """``series`` maps a column name to its values along ``x``."""
    frame = _Frame(_bounds(x), _bounds([v for ys in series.values() for v in ys]))
    body = _axes(frame, xlabel, "value", title)
    for k, (name, ys) in enumerate(series.items()):
        color = COLORS[k % len(COLORS)]
        pts = " ".join(f"{frame.px(a):.2f},{frame.py(b):.2f}"
                       for a, b in zip(x, ys) if math.isfinite(a) and math.isfinite(b))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{W - PAD + 4}" y="{PAD + 14 * (k + 1)}" font-size="10" '
                    f'fill="{color}">{escape(name)}</text>')
    return _doc(body)


def scatter_svg(x, y, xlabel="a", ylabel="b", title=""):
    """Scatter on a shared square range with the y = x reference line."""
    lo, hi = _bounds(list(x) + list(y))
    frame = _Frame((lo, hi), (lo, hi))
    body = _axes(frame, xlabel, ylabel, title)
    body.append(f'<line class="identity" x1="{frame.px(lo):.2f}" y1="{frame.py(lo):.2f}" '
                f'x2="{frame.px(hi):.2f}" y2="{frame.py(hi):.2f}" stroke="#999" '
                'stroke-dasharray="4 3"/>')
    for a, b in zip(x, y):
        if math.isfinite(a) and math.isfinite(b):
            body.append(f'<circle cx="{frame.px(a):.2f}" cy="{frame.py(b):.2f}" r="2" '
                        'fill="#1f77b4" fill-opacity="0.6"/>')
    return _doc(body)


def render_csv(path, kind="auto"):
    """SVG text for one CSV. ``auto`` picks scatter for two-column files named scatter*."""
    header, cols = read_numeric_csv(path)
    name = os.path.basename(path)
    if kind == "auto":
        kind = "scatter" if name.startswith("scatter") and len(header) == 2 else "line"
    if kind == "scatter":
        if len(header) < 2:
            raise CsvFormatError(f"{path}: scatter needs two columns")
        return scatter_svg(cols[0], cols[1], header[0], header[1], name)
    if len(header) < 2:
        raise CsvFormatError(f"{path}: line plot needs an x column and at least one series")
    return line_svg(cols[0], dict(zip(header[1:], cols[1:])), header[0], name)
