"""Dependency-free SVG line charts for run logs.

Charts are plain SVG 1.1: one polyline per series plus a small legend,
so outputs are diffable and testable without a raster stack. `plot_run`
turns a per-epoch CSV into the standard four-panel set: loss and error
per split, NC1 and NC2 (support vs query) per split.
"""

from __future__ import annotations

import csv
from pathlib import Path

WIDTH, HEIGHT = 640, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 64, 20, 40, 44
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def line_chart(path, title: str, xlabel: str, ylabel: str, series) -> None:
    """Write one SVG chart. `series` is a list of (label, xs, ys)."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y_lo, y_hi = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x: float) -> float:
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="16" '
        f'font-family="sans-serif">{title}</text>',
    ]
    axis_y = MARGIN_T + plot_h
    parts.append(
        f'<line x1="{MARGIN_L}" y1="{axis_y}" x2="{MARGIN_L + plot_w}" y2="{axis_y}" '
        f'stroke="black"/>'
    )
    parts.append(
        f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" y2="{axis_y}" stroke="black"/>'
    )
    for tx in _ticks(x_lo, x_hi):
        parts.append(
            f'<text x="{_fmt(px(tx))}" y="{axis_y + 16}" text-anchor="middle" '
            f'font-size="11" font-family="sans-serif">{_fmt(tx)}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        parts.append(
            f'<text x="{MARGIN_L - 6}" y="{_fmt(py(ty) + 4)}" text-anchor="end" '
            f'font-size="11" font-family="sans-serif">{_fmt(ty)}</text>'
        )
        parts.append(
            f'<line x1="{MARGIN_L}" y1="{_fmt(py(ty))}" x2="{MARGIN_L + plot_w}" '
            f'y2="{_fmt(py(ty))}" stroke="#dddddd"/>'
        )
    parts.append(
        f'<text x="{MARGIN_L + plot_w / 2}" y="{HEIGHT - 8}" text-anchor="middle" '
        f'font-size="13" font-family="sans-serif">{xlabel}</text>'
    )
    parts.append(
        f'<text x="16" y="{MARGIN_T + plot_h / 2}" text-anchor="middle" font-size="13" '
        f'font-family="sans-serif" transform="rotate(-90 16 {MARGIN_T + plot_h / 2})">'
        f"{ylabel}</text>"
    )
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        ly = MARGIN_T + 14 + 16 * k
        lx = MARGIN_L + plot_w - 150
        parts.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 22}" y2="{ly - 4}" stroke="{color}" '
            f'stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{lx + 28}" y="{ly}" font-size="12" font-family="sans-serif">{label}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def read_epoch_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def plot_run(epoch_csv, out_dir) -> list[Path]:
    """Render the four-panel chart set for a per-epoch CSV; returns paths."""
    rows = read_epoch_log(epoch_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = [s for s in ("train", "val", "test") if any(r["split"] == s for r in rows)]
    written: list[Path] = []

    def split_series(column: str):
        series = []
        for s in splits:
            sel = [r for r in rows if r["split"] == s]
            series.append((s, [float(r["epoch"]) for r in sel], [float(r[column]) for r in sel]))
        return series

    for column, title in (("loss", "Episode loss"), ("error", "Query error")):
        path = out / f"{column}.svg"
        line_chart(path, title, "epoch", column, split_series(column))
        written.append(path)

    for metric in ("nc1", "nc2"):
        for s in splits:
            sel = [r for r in rows if r["split"] == s]
            xs = [float(r["epoch"]) for r in sel]
            series = [
                ("support", xs, [float(r[f"{metric}_support"]) for r in sel]),
                ("query", xs, [float(r[f"{metric}_query"]) for r in sel]),
            ]
            path = out / f"{metric}_{s}.svg"
            line_chart(path, f"{metric.upper()} ({s})", "epoch", metric.upper(), series)
            written.append(path)
    return written
