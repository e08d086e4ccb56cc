"""
Self-contained SVG line charts rendered from CSV columns.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from django.template.loader import render_to_string

from .exceptions import ReportError

logger = logging.getLogger(__name__)

WIDTH = 640
HEIGHT = 400
MARGIN = {'left': 70, 'right': 150, 'top': 40, 'bottom': 60}
TICKS = 5
PALETTE = ['#1f77b4', '#d62728', '#2ca02c', '#ff7f0e', '#9467bd', '#8c564b', '#e377c2', '#7f7f7f']


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    raw = frame[column]
    values = pd.to_numeric(raw, errors='coerce')
    bad = values.isna() | ~np.isfinite(values.astype(float))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ReportError(f"Non-numeric value {raw.iloc[row]!r} at row {row + 1}, column {column!r}")
    return values.to_numpy(dtype=np.float64)


def _axis(values: np.ndarray):
    low, high = float(values.min()), float(values.max())
    if high == low:
        low, high = low - 0.5, high + 0.5
    return low, high


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _ticks(low: float, high: float, to_px) -> List[dict]:
    return [
        {'pos': _fmt(to_px(value)), 'label': f"{value:.3g}"}
        for value in np.linspace(low, high, TICKS)
    ]


def emit_plot(
    csv_path,
    x: str,
    ys: Sequence[str],
    out_path,
    title: Optional[str] = None,
) -> Path:
    """
    Draw one polyline per y column against x and write the SVG.

    Rows are plotted in file order. Output bytes depend only on the input.
    """
    csv_path, out_path = Path(csv_path), Path(out_path)
    if not ys:
        raise ReportError("emit_plot: no y columns given")
    try:
        frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ReportError(f"Cannot read {csv_path}: {exc}") from exc
    for column in [x, *ys]:
        if column not in frame.columns:
            raise ReportError(f"Column {column!r} not found in {csv_path.name}; have {list(frame.columns)}")
    if frame.empty:
        raise ReportError(f"{csv_path.name} has no data rows")

    xs = _numeric_column(frame, x)
    series_values = [(name, _numeric_column(frame, name)) for name in ys]

    plot_w = WIDTH - MARGIN['left'] - MARGIN['right']
    plot_h = HEIGHT - MARGIN['top'] - MARGIN['bottom']
    x_low, x_high = _axis(xs)
    y_low, y_high = _axis(np.concatenate([values for _, values in series_values]))

    def x_px(value):
        return MARGIN['left'] + (value - x_low) / (x_high - x_low) * plot_w

    def y_px(value):
        return MARGIN['top'] + (y_high - value) / (y_high - y_low) * plot_h

    series = []
    for index, (name, values) in enumerate(series_values):
        points = ' '.join(f"{_fmt(x_px(a))},{_fmt(y_px(b))}" for a, b in zip(xs, values))
        series.append({
            'name': name,
            'color': PALETTE[index % len(PALETTE)],
            'points': points,
            'legend_y': MARGIN['top'] + 20 * index,
        })

    context = {
        'width': WIDTH,
        'height': HEIGHT,
        'title': title or f"{', '.join(ys)} vs {x}",
        'left': MARGIN['left'],
        'right': WIDTH - MARGIN['right'],
        'top': MARGIN['top'],
        'bottom': HEIGHT - MARGIN['bottom'],
        'x_label': x,
        'y_label': ', '.join(ys),
        'x_label_y': HEIGHT - 15,
        'y_label_x': 20,
        'mid_x': _fmt(MARGIN['left'] + plot_w / 2),
        'mid_y': _fmt(MARGIN['top'] + plot_h / 2),
        'legend_x': WIDTH - MARGIN['right'] + 15,
        'x_ticks': _ticks(x_low, x_high, x_px),
        'y_ticks': _ticks(y_low, y_high, y_px),
        'series': series,
    }
    svg = render_to_string('replay/line_chart.svg', context)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg, encoding='utf-8')
    logger.info(f"Wrote {out_path}")
    return out_path
