"""Deterministic SVG and CSV report emission.

SVG over raster plots: text output, diffable, no plotting dependency.
Every renderer takes plain data and returns a string; byte stability
under rerun is part of the contract, so floats are formatted explicitly
and nothing here reads clocks, paths, or environment. Audit metadata
(config hash, seeds) goes into a leading ``#`` comment line for CSV and
a ``<desc>`` element for SVG.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .albedo import ClassHistogram, N_CLASSES, RipenessRatioTable

CLASS_COLORS = ("#4daf4a", "#a6d854", "#ffd92f", "#fc8d62", "#e41a1c")
BERRY_COLORS = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939",
    "#8c6d31", "#843c39", "#7b4173", "#3182bd", "#e6550d", "#31a354",
)

WIDTH = 640
HEIGHT = 360
MARGIN = 52


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _svg_open(title: str, meta: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f"<desc>{meta}</desc>",
        f'<text x="{WIDTH // 2}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="none"/>',
    ]


def _axes(lines: list[str]) -> None:
    lines.append(
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black" stroke-width="1"/>'
    )
    lines.append(
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black" stroke-width="1"/>'
    )


def render_ratio_csv(table: RipenessRatioTable, meta: str | None = None) -> str:
    """Ripeness-ratio table, one bog per row, one date per column."""
    lines = []
    if meta is not None:
        lines.append(f"# {meta}")
    lines.append("bog," + ",".join(table.dates))
    for bog, row in zip(table.bogs, table.values):
        lines.append(bog + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def render_histograms_svg(
    histograms: Sequence[ClassHistogram],
    dates: Sequence[str],
    bog: str,
    meta: str = "",
) -> str:
    """Stacked class-fraction bars over dates for one bog."""
    if len(histograms) != len(dates):
        raise ValueError("one date per histogram required")
    lines = _svg_open(f"Albedo classes over time: {bog}", meta)
    _axes(lines)
    n = len(histograms)
    span = WIDTH - 2 * MARGIN
    bar_w = min(40.0, span / max(n, 1) * 0.7)
    plot_h = HEIGHT - 2 * MARGIN
    for i, (hist, date) in enumerate(zip(histograms, dates)):
        cx = MARGIN + span * (i + 0.5) / n
        x = cx - bar_w / 2
        lines.append(
            f'<text x="{_fmt(cx)}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="10">{date}</text>'
        )
        if hist.empty:
            lines.append(
                f'<text x="{_fmt(cx)}" y="{HEIGHT - MARGIN - 8}" text-anchor="middle" '
                f'font-family="sans-serif" font-size="10" fill="#888">no detections</text>'
            )
            continue
        y = float(HEIGHT - MARGIN)
        for cls in range(1, N_CLASSES + 1):
            frac = hist.fractions[cls - 1]
            h = plot_h * frac
            if h <= 0:
                continue
            y -= h
            lines.append(
                f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(bar_w)}" '
                f'height="{_fmt(h)}" fill="{CLASS_COLORS[cls - 1]}">'
                f"<title>{date} class {cls}: {hist.counts[cls - 1]}</title></rect>"
            )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def _bounds(values: np.ndarray) -> tuple[float, float]:
    lo = float(values.min())
    hi = float(values.max())
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_embedding_svg(
    berry_ids: Sequence[int],
    timepoints: Sequence[int],
    points: np.ndarray,
    meta: str = "",
) -> str:
    """2-D embedding scatter with one trajectory polyline per berry."""
    berry_ids = np.asarray(berry_ids, dtype=np.int64)
    timepoints = np.asarray(timepoints, dtype=np.int64)
    points = np.asarray(points, dtype=np.float64)
    lines = _svg_open("Appearance manifold (berry trajectories)", meta)
    xlo, xhi = _bounds(points[:, 0])
    ylo, yhi = _bounds(points[:, 1])

    def sx(v: float) -> float:
        return MARGIN + (v - xlo) / (xhi - xlo) * (WIDTH - 2 * MARGIN)

    def sy(v: float) -> float:
        return HEIGHT - MARGIN - (v - ylo) / (yhi - ylo) * (HEIGHT - 2 * MARGIN)

    for idx, berry in enumerate(np.unique(berry_ids)):
        sel = berry_ids == berry
        order = np.argsort(timepoints[sel], kind="stable")
        pts = points[sel][order]
        color = BERRY_COLORS[idx % len(BERRY_COLORS)]
        path = " ".join(f"{_fmt(sx(p[0]))},{_fmt(sy(p[1]))}" for p in pts)
        lines.append(
            f'<polyline points="{path}" fill="none" stroke="{color}" '
            f'stroke-width="1.2" opacity="0.8"/>'
        )
        for p in pts:
            lines.append(
                f'<circle cx="{_fmt(sx(p[0]))}" cy="{_fmt(sy(p[1]))}" r="2.2" '
                f'fill="{color}"/>'
            )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_ripeness_svg(
    series: Mapping[int, Sequence[tuple[str, float]]],
    meta: str = "",
) -> str:
    """Per-berry ripeness against capture date, one polyline per berry."""
    all_dates = sorted({d for entries in series.values() for d, _ in entries})
    date_x = {d: i for i, d in enumerate(all_dates)}
    n = max(len(all_dates) - 1, 1)
    lines = _svg_open("Per-berry ripeness over time", meta)
    _axes(lines)

    def sx(date: str) -> float:
        return MARGIN + date_x[date] / n * (WIDTH - 2 * MARGIN)

    def sy(v: float) -> float:
        return HEIGHT - MARGIN - v * (HEIGHT - 2 * MARGIN)

    step = max(1, len(all_dates) // 8)
    for d in all_dates[::step]:
        lines.append(
            f'<text x="{_fmt(sx(d))}" y="{HEIGHT - MARGIN + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="9">{d}</text>'
        )
    for tick in (0.0, 0.5, 1.0):
        lines.append(
            f'<text x="{MARGIN - 6}" y="{_fmt(sy(tick) + 3)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="9">{tick:.1f}</text>'
        )
    for idx, berry in enumerate(sorted(series)):
        entries = sorted(series[berry])
        color = BERRY_COLORS[idx % len(BERRY_COLORS)]
        path = " ".join(f"{_fmt(sx(d))},{_fmt(sy(v))}" for d, v in entries)
        lines.append(
            f'<polyline points="{path}" fill="none" stroke="{color}" '
            f'stroke-width="1.2"><title>berry {berry}</title></polyline>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_ranking_csv(scores, meta: str | None = None) -> str:
    """Extractor comparison table, best ranked first."""
    lines = []
    if meta is not None:
        lines.append(f"# {meta}")
    lines.append("rank,extractor,linearity,monotonicity")
    for rank, s in enumerate(scores, start=1):
        lines.append(
            f"{rank},{s.name},{repr(float(s.linearity))},{repr(float(s.monotonicity))}"
        )
    return "\n".join(lines) + "\n"
