"""Loss curves as plain SVG polylines."""

import logging
import math
import pathlib
from typing import Dict, Sequence

_logger = logging.getLogger(__name__)

_COLOURS = {"l_total": "black", "l_ar": "#1f77b4", "l_sc": "#d62728"}


def render_loss_curve(
    steps: Sequence[int],
    series: Dict[str, Sequence[float]],
    width: int = 640,
    height: int = 360,
    margin: int = 40,
) -> str:
    """One polyline per loss series, sharing the axes.

    Examples:
        >>> svg = render_loss_curve([0, 1, 2], {"l_total": [3.0, 2.0, 1.0]})
        >>> svg.count("<polyline")
        1
        >>> 'points="40.00,40.00 320.00,180.00 600.00,320.00"' in svg
        True
    """
    values = [v for s in series.values() for v in s if math.isfinite(v)]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    first, last = (min(steps), max(steps)) if steps else (0, 1)
    span = max(last - first, 1)
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def point(step, value):
        x = margin + plot_w * (step - first) / span
        y = margin + plot_h * (hi - value) / (hi - lo)
        return f"{x:.2f},{y:.2f}"

    rows = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="grey"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="grey"/>',
        f'<text x="{margin}" y="{margin - 8}" font-size="11">{hi:.4g}</text>',
        f'<text x="{margin}" y="{height - margin + 14}" font-size="11">{lo:.4g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 14}" font-size="11" '
        f'text-anchor="end">step {last}</text>',
    ]
    for i, (name, data) in enumerate(series.items()):
        points = " ".join(point(s, v) for s, v in zip(steps, data) if math.isfinite(v))
        colour = _COLOURS.get(name, "grey")
        rows.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{points}"/>')
        rows.append(
            f'<text x="{width - margin}" y="{margin + 14 * i}" font-size="11" '
            f'text-anchor="end" fill="{colour}">{name}</text>'
        )
    rows.append("</svg>")
    return "\n".join(rows) + "\n"


def write_loss_curve(path: pathlib.Path, steps, series) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_loss_curve(steps, series), encoding="utf-8")
    _logger.info("wrote loss curve to %s", path)
