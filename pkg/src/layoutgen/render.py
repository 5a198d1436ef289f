"""SVG rendering of layouts.

The unit canvas is scaled to 400x600; boxes are drawn with a fixed per-
category palette at 40% fill opacity so overlaps stay visible.  Output is
byte-stable for golden-file comparison: fixed attribute order and fixed
two-decimal coordinate formatting.
"""

from __future__ import annotations

from pathlib import Path

from .vocab import Layout, Vocabulary, element_box

CANVAS_W = 400
CANVAS_H = 600

PALETTE = (
    "#4e79a7",
    "#f28e2b",
    "#e15759",
    "#76b7b2",
    "#59a14f",
    "#edc948",
    "#b07aa1",
    "#ff9da7",
)


def render_svg(layout: Layout, vocab: Vocabulary) -> str:
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{CANVAS_W}" height="{CANVAS_H}" '
        f'viewBox="0 0 {CANVAS_W} {CANVAS_H}">',
        f'<rect x="0" y="0" width="{CANVAS_W}" height="{CANVAS_H}" fill="#ffffff" stroke="#cccccc"/>',
    ]
    for el in layout.elements:
        left, top, right, bottom = element_box(el, vocab)
        color = PALETTE[el.c % len(PALETTE)]
        lines.append(
            f'<rect x="{left * CANVAS_W:.2f}" y="{top * CANVAS_H:.2f}" '
            f'width="{(right - left) * CANVAS_W:.2f}" height="{(bottom - top) * CANVAS_H:.2f}" '
            f'fill="{color}" fill-opacity="0.4" stroke="{color}" stroke-width="1.5"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def render_to_dir(layouts: list[Layout], vocab: Vocabulary, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, layout in enumerate(layouts):
        path = out_dir / f"layout_{i:05d}.svg"
        path.write_text(render_svg(layout, vocab), encoding="utf-8")
        paths.append(path)
    return paths
