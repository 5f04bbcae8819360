"""Minimal self-contained SVG line charts for metrics CSVs."""
from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

from .sim import CSV_COLUMNS
from .sparsify import ConfigError

X_COLUMNS = {"time": "sim_time_ms", "step": "step"}
Y_COLUMNS = {"loss": "loss", "accuracy": "acc", "bytes": "cum_bytes"}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")

W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 160, 20, 50


def _read_rows(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        return list(reader.fieldnames or []), list(reader)


def load_series(paths, x: str, y: str) -> list[tuple[str, list[tuple[float, float]]]]:
    """One ``(label, points)`` per input file; the label is the file stem.

    ``bytes`` plots cumulative up plus down traffic. Rows with a blank y
    value (steps without evaluation) are skipped.
    """
    if x not in X_COLUMNS:
        raise ConfigError(f"x: unknown column {x!r}")
    if y not in Y_COLUMNS:
        raise ConfigError(f"y: unknown column {y!r}")
    out = []
    for p in ([paths] if isinstance(paths, (str, Path)) else paths):
        header, rows = _read_rows(p)
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ConfigError(f"{p}: unknown or missing column {missing[0]!r}")
        pts = []
        for r in rows:
            if y == "bytes":
                yv = float(r["cum_bytes_up"]) + float(r["cum_bytes_down"])
            elif r[Y_COLUMNS[y]] == "":
                continue
            else:
                yv = float(r[Y_COLUMNS[y]])
            pts.append((float(r[X_COLUMNS[x]]), yv))
        out.append((Path(p).stem, pts))
    return out


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def svg_line_chart(series, x_label: str, y_label: str) -> str:
    """Render series as a fixed-size SVG; identical input gives identical bytes."""
    pts = [p for _, s in series for p in s]
    if pts:
        x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
        y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def sx(v):
        return LEFT + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return TOP + ph - (v - y0) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<g class="axes" stroke="black" fill="none">'
        f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}"/>'
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}"/></g>',
        '<g font-family="sans-serif" font-size="11">',
    ]
    for i in range(5):
        fx, fy = x0 + (x1 - x0) * i / 4, y0 + (y1 - y0) * i / 4
        parts.append(f'<text x="{sx(fx):.2f}" y="{TOP + ph + 15}" text-anchor="middle">{_fmt(fx)}</text>')
        parts.append(f'<text x="{LEFT - 5}" y="{sy(fy) + 4:.2f}" text-anchor="end">{_fmt(fy)}</text>')
    parts.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">{escape(x_label)}</text>')
    parts.append(f'<text x="15" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 15 {TOP + ph / 2:.1f})">{escape(y_label)}</text>')
    parts.append("</g>")
    for i, (label, s) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if s:
            coords = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in s)
            parts.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        else:
            continue
        ly = TOP + 15 + 18 * i
        parts.append(f'<g class="legend"><line x1="{W - RIGHT + 10}" y1="{ly}" x2="{W - RIGHT + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/><text x="{W - RIGHT + 35}" y="{ly + 4}" '
                     f'font-family="sans-serif" font-size="11">{escape(label)}</text></g>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
