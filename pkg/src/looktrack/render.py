"""Three-panel SVG of an event: input hits, predicted tracks, target tracks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .encoding import MISSING
from .simulator import Event

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#bcbd22",
    "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd", "#e6550d",
)
FAKE_COLOR = "#b0b0b0"


def _color(i: int) -> str:
    return PALETTE[i % len(PALETTE)]


def _panel(title: str, x0: float, scale: float, event: Event, tracks, show_fakes: bool,
           connect: bool = True) -> list[str]:
    size_w, size_h = event.width * scale, event.height * scale
    out = [
        f'<g transform="translate({x0:.1f},24)">',
        f'<rect x="0" y="0" width="{size_w:.1f}" height="{size_h:.1f}" fill="white" stroke="black"/>',
        f'<text x="{size_w / 2:.1f}" y="-8" text-anchor="middle" font-size="12">{title}</text>',
    ]
    r = max(scale * 0.45, 0.8)

    def center(cell):
        return (cell[1] + 0.5) * scale, (cell[0] + 0.5) * scale

    if show_fakes:
        for _, row, col in event.fakes:
            cx, cy = center((row, col))
            out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{r:.2f}" fill="{FAKE_COLOR}"/>')
    for i, track in enumerate(tracks):
        cells = [c for c in np.asarray(track) if c[0] != MISSING]
        pts = [center(c) for c in cells]
        color = _color(i)
        if connect and len(pts) > 1:
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="{r / 2:.2f}"/>')
        for x, y in pts:
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:.2f}" fill="{color}"/>')
    out.append("</g>")
    return out


def render_svg(event: Event, predicted=None, scale: float = 4.0) -> str:
    """SVG text; ``predicted`` is a (n, d, 2) array of reconstructed tracks."""
    predicted = np.zeros((0, event.n_stations, 2), dtype=int) if predicted is None else predicted
    gap = 20.0
    panel_w = event.width * scale
    width = 3 * panel_w + 4 * gap
    height = event.height * scale + 40
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="#f7f7f7"/>',
    ]
    lines += _panel("input", gap, scale, event, event.tracks, show_fakes=True, connect=False)
    lines += _panel("prediction", 2 * gap + panel_w, scale, event, predicted, show_fakes=False)
    lines += _panel("target", 3 * gap + 2 * panel_w, scale, event, event.tracks, show_fakes=False)
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_svg(path, event: Event, predicted=None, scale: float = 4.0) -> None:
    Path(path).write_text(render_svg(event, predicted, scale))
