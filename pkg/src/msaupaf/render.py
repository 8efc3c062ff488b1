"""SVG overlays of forms: char-grid, class masks, keypoint heat and links."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .chargrid import CharGrid, CharVocab
from .funsd_io import FormDocument

CLASS_COLORS = {
    "header": "#f2c500",  # yellow
    "question": "#2ca02c",  # green
    "answer": "#1f77b4",  # blue
    "other": "#9a9a9a",
}
LINK_COLOR = "#ff7f0e"  # orange
HEAT_COLOR = "#d62728"


def _num(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def render_svg(
    form: FormDocument,
    grid: CharGrid | None = None,
    vocab: CharVocab | None = None,
    heat: np.ndarray | None = None,
    field_scale: float = 1.0,
    heat_floor: float = 0.05,
) -> str:
    """One SVG document in page-pixel coordinates.

    ``heat`` is an ``Hf x Wf`` map in [0, 1] drawn with ``field_scale`` page
    pixels per cell.  Links run from each answer's bottom-left corner to its
    question's bottom-left corner.
    """
    w, h = form.page_width, form.page_height
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>',
        '<g id="masks" fill-opacity="0.35">',
    ]
    for e in form.entities:
        x1, y1, x2, y2 = e.box
        out.append(
            f'<rect class="{e.label}" data-id="{e.id}" x="{x1}" y="{y1}" width="{x2 - x1}" '
            f'height="{y2 - y1}" fill="{CLASS_COLORS[e.label]}" stroke="{CLASS_COLORS[e.label]}"/>'
        )
    out.append("</g>")

    if heat is not None:
        out.append(f'<g id="heat" fill="{HEAT_COLOR}">')
        for i, j in zip(*np.nonzero(heat >= heat_floor)):
            s = field_scale
            out.append(
                f'<rect x="{_num(j * s)}" y="{_num(i * s)}" width="{_num(s)}" height="{_num(s)}" '
                f'fill-opacity="{_num(float(min(heat[i, j], 1.0)) * 0.6)}"/>'
            )
        out.append("</g>")

    if grid is not None and vocab is not None:
        s = grid.scale
        out.append(
            f'<g id="chargrid" font-family="monospace" font-size="{_num(s)}" fill="#333" '
            'text-anchor="middle" dominant-baseline="central">'
        )
        for i, j in zip(*np.nonzero(grid.cells)):
            ch = vocab.chars[int(grid.cells[i, j]) - 1]
            out.append(f'<text x="{_num((j + 0.5) * s)}" y="{_num((i + 0.5) * s)}">{escape(ch)}</text>')
        out.append("</g>")

    out.append(f'<g id="links" stroke="{LINK_COLOR}" stroke-width="2">')
    for q, a in form.links:
        qb, ab = form.entity(q).box, form.entity(a).box
        out.append(
            f'<line data-q="{q}" data-a="{a}" x1="{ab[0]}" y1="{ab[3]}" x2="{qb[0]}" y2="{qb[3]}"/>'
        )
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
