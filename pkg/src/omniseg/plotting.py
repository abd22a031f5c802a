"""Plain SVG line charts for ablation tables and training logs."""

from __future__ import annotations

import math
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=60, right=130, top=30, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

Series = Mapping[str, Sequence[tuple[float, float]]]


def _span(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(values), max(values)
    if lo == hi:
        pad = abs(lo) * 0.05 or 0.5
        return lo - pad, hi + pad
    return lo, hi


def line_chart(series: Series, x_label: str, y_label: str, title: str = "") -> str:
    """One polyline per series; non-finite points are dropped."""
    clean = {k: [(x, y) for x, y in pts if math.isfinite(x) and math.isfinite(y)] for k, pts in series.items()}
    clean = {k: v for k, v in clean.items() if v}
    if not clean:
        raise ValueError("nothing to plot")
    x0, x1 = _span([x for pts in clean.values() for x, _ in pts])
    y0, y1 = _span([y for pts in clean.values() for _, y in pts])
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x: float) -> float:
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def sy(y: float) -> float:
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line x1="{MARGIN["left"]}" y1="{MARGIN["top"] + ph}" x2="{MARGIN["left"] + pw}" y2="{MARGIN["top"] + ph}" stroke="black"/>',
        f'<line x1="{MARGIN["left"]}" y1="{MARGIN["top"]}" x2="{MARGIN["left"]}" y2="{MARGIN["top"] + ph}" stroke="black"/>',
    ]
    for frac in (0.0, 0.5, 1.0):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        out.append(f'<text x="{sx(xv):.1f}" y="{MARGIN["top"] + ph + 16}" font-size="10" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{sy(yv) + 3:.1f}" font-size="10" text-anchor="end">{yv:.3g}</text>')
    out.append(
        f'<text class="x-label" x="{MARGIN["left"] + pw / 2}" y="{HEIGHT - 12}" font-size="12" text-anchor="middle">{escape(x_label)}</text>'
    )
    out.append(
        f'<text class="y-label" x="16" y="{MARGIN["top"] + ph / 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2})">{escape(y_label)}</text>'
    )
    if title:
        out.append(f'<text x="{WIDTH / 2}" y="18" font-size="13" text-anchor="middle">{escape(title)}</text>')
    for i, (name, pts) in enumerate(clean.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in sorted(pts))
        out.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        ly = MARGIN["top"] + 14 * i + 8
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 16}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 20}" y="{ly + 4}" font-size="11">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def ablation_chart(rows: Sequence[Mapping[str, str]], strategy: str = "aplr") -> str:
    """mIoU against labeled fraction, one line per mode, from aggregated rows."""
    series: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        if row.get("kind", "mean") != "mean" or row.get("strategy", strategy) != strategy:
            continue
        series.setdefault(row["mode"], []).append((float(row["fraction"]), 100.0 * float(row["miou"])))
    if not series:
        raise ValueError("ablation table has no aggregated rows to plot")
    return line_chart(series, "labeled fraction", "test mIoU (%)", "mIoU vs labeled fraction")


def training_chart(logs: Mapping[str, Sequence[Mapping[str, str]]]) -> str:
    """Supervised and omni loss per step for each named metrics log."""
    series: dict[str, list[tuple[float, float]]] = {}
    for name, rows in logs.items():
        for row in rows:
            step = float(row["step"])
            series.setdefault(f"{name} l_sup", []).append((step, float(row["l_sup"])))
            if float(row["l_omni"]) != 0.0:
                series.setdefault(f"{name} l_omni", []).append((step, float(row["l_omni"])))
    return line_chart(series, "step", "loss (BCE)", "training curves")


def validation_chart(logs: Mapping[str, Sequence[Mapping[str, str]]]) -> str | None:
    series = {
        name: [(float(r["step"]), 100.0 * float(r["val_miou"])) for r in rows if r.get("val_miou")]
        for name, rows in logs.items()
    }
    if not any(series.values()):
        return None
    return line_chart(series, "step", "val mIoU (%)", "validation mIoU")
