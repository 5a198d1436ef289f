"""Procedural synthetic layout corpus and JSONL dataset IO.

Two small grammars produce structured layouts on a half-bin edge lattice so
that, at zero jitter, every element shares at least one exact alignment axis
with another element and no two boxes overlap.  This gives the metric suite
exact oracle fixtures (alignment == 0, overlap == 0) and guarantees that
corrupting any single token visibly breaks structure.

``doc`` layouts look like documents: an optional full-width header, one to
three top-aligned columns of left-aligned blocks, and an optional footer.
``ui`` layouts look like mobile screens: stacked full-width bars with
occasional side-by-side half-width pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .vocab import Element, Layout

GRAMMARS = ("doc", "ui")


class DataError(ValueError):
    """Raised for malformed datasets or invalid generator configs."""


@dataclass(frozen=True)
class SynthConfig:
    """Settings for the procedural corpus generator.

    ``jitter`` perturbs each element's x-center independently (breaking
    exact alignment); ``shift_range`` moves a whole layout's grid left or
    right by up to that many bins (alignment-preserving, like a varying
    page margin), which densifies the population of x values without making
    any single token ambiguous given its layout.
    """

    grammar: str = "doc"
    n_lo: int = 1
    n_hi: int = 8
    num_bins: int = 32
    num_categories: int = 5
    jitter: int = 0
    shift_range: int = 0
    seed: int = 0
    count: int = 1000

    def validate(self) -> None:
        if self.grammar not in GRAMMARS:
            raise DataError(f"unknown grammar {self.grammar!r}, expected one of {GRAMMARS}")
        if not 1 <= self.n_lo <= self.n_hi:
            raise DataError("need 1 <= n_lo <= n_hi")
        if self.jitter < 0 or self.jitter >= self.num_bins / 4:
            raise DataError("jitter must be in [0, num_bins / 4)")
        if self.shift_range < 0 or self.shift_range > 2:
            raise DataError("shift_range must be in [0, 2] (the grid margin allows 2 bins)")
        if self.num_categories < 2:
            raise DataError("grammars need at least 2 categories")
        if self.num_bins < 16:
            raise DataError("grammars need at least 16 bins")
        if self.count < 0:
            raise DataError("count must be >= 0")


def _element_from_codes(left, right, top, bottom, cat) -> Element:
    """Build an element from edge codes on the half-bin lattice.

    Edge codes live in [0, 2B); a box with left code E and right code R has
    width bin (R - E) / 2 and center bin (E + R) / 4, so codes that are
    multiples of four always produce integral bins, and elements sharing an
    edge code share the exact dequantized edge.
    """
    for v in (left, right, top, bottom):
        if v % 4:
            raise DataError("edge codes must be multiples of 4")
    return Element(
        c=cat,
        x=(left + right) // 4,
        y=(top + bottom) // 4,
        w=(right - left) // 2,
        h=(bottom - top) // 2,
    )


_GAP = 4  # lattice gap between boxes, in edge codes


def _doc_layout(rng: np.random.Generator, cfg: SynthConfig) -> Layout:
    step = 4 * (cfg.num_bins // 16)  # box sizes scale with bin count
    lo, hi = _GAP, (2 * cfg.num_bins) - _GAP  # canvas edge codes with margin
    cats = cfg.num_categories
    budget = cfg.n_hi

    elements: list[Element] = []
    header = rng.random() < 0.9
    footer = rng.random() < 0.5
    n_cols = int(rng.integers(2, 4))
    # one element height per layout: every element pins every other's height,
    # and a corrupted height can never match a sibling
    h_code = int(rng.choice([step, 2 * step]))

    content_top = _GAP
    if header:
        elements.append(_element_from_codes(lo, hi, _GAP, _GAP + h_code, 0))
        content_top = _GAP + h_code + _GAP
        budget -= 1
    content_limit = hi - h_code - _GAP if footer else hi
    if footer:
        budget -= 1

    col_w = (((hi - lo) - (n_cols - 1) * _GAP) // n_cols // 4) * 4
    columns = []
    left = lo
    for _ in range(n_cols):
        columns.append((left, left + col_w))
        left += col_w + _GAP

    # category is drawn once per column; every column fits the same block
    # count bound, so single-block columns stay top-aligned across the grid
    if content_top + h_code <= content_limit:
        for col_lo, col_hi in columns:
            cat = int(rng.integers(1, max(2, cats - 1)))
            top = content_top
            for _ in range(int(rng.integers(1, 4))):
                if top + h_code > content_limit or budget <= 0:
                    break
                elements.append(_element_from_codes(col_lo, col_hi, top, top + h_code, cat))
                budget -= 1
                top += h_code + _GAP

    if footer:
        elements.append(_element_from_codes(lo, hi, hi - h_code, hi, cats - 1))
    return Layout(elements)


def _ui_layout(rng: np.random.Generator, cfg: SynthConfig) -> Layout:
    step = 4 * (cfg.num_bins // 16)
    lo, hi = _GAP, (2 * cfg.num_bins) - _GAP
    cats = cfg.num_categories
    # symmetric side-by-side split: both halves get the same width
    half = ((hi - lo - 2 * _GAP) // 2 // 4) * 4
    mid_l = lo + half
    mid_r = hi - half

    elements: list[Element] = []
    top = _GAP
    n_rows = int(rng.integers(2, 7))
    # one row height and one bar category per layout: rows pin each other down
    h_code = int(rng.choice([step, 2 * step]))
    bar_cat = int(rng.choice([0, 1, cats - 1]))
    for _ in range(n_rows):
        if top + h_code > hi or len(elements) >= cfg.n_hi - 1:
            break
        if rng.random() < 0.3 and cats >= 4:
            elements.append(_element_from_codes(lo, mid_l, top, top + h_code, 2))
            elements.append(_element_from_codes(mid_r, hi, top, top + h_code, 3))
        else:
            elements.append(_element_from_codes(lo, hi, top, top + h_code, bar_cat))
        top += h_code + _GAP
    return Layout(elements)


def _apply_jitter(layout: Layout, rng: np.random.Generator, cfg: SynthConfig) -> Layout:
    """Apply the per-layout grid shift, then per-element x jitter.

    The shift moves every element together (alignment preserved); jitter
    moves x-centers independently (horizontal misalignment).  Only x is
    touched either way, so vertical structure stays exactly inferable.
    """
    if cfg.jitter == 0 and cfg.shift_range == 0:
        return layout
    big = cfg.num_bins - 1
    shift = int(rng.integers(-cfg.shift_range, cfg.shift_range + 1)) if cfg.shift_range else 0
    out = []
    for el in layout.elements:
        dx = shift
        if cfg.jitter:
            dx += int(rng.integers(-cfg.jitter, cfg.jitter + 1))
        out.append(Element(el.c, int(np.clip(el.x + dx, 0, big)), el.y, el.w, el.h))
    return Layout(out)


def synth_generate(cfg: SynthConfig) -> list[Layout]:
    """Generate ``cfg.count`` layouts, deterministic per (seed, index)."""
    cfg.validate()
    build = _doc_layout if cfg.grammar == "doc" else _ui_layout
    layouts = []
    for i in range(cfg.count):
        rng = np.random.default_rng([cfg.seed, i])
        for _ in range(64):
            layout = build(rng, cfg)
            if cfg.n_lo <= len(layout) <= cfg.n_hi:
                break
        else:
            raise DataError(
                f"could not hit element-count range [{cfg.n_lo}, {cfg.n_hi}] for sample {i}"
            )
        layouts.append(_apply_jitter(layout, rng, cfg))
    return layouts


def save_jsonl(layouts: list[Layout], path: str | Path) -> None:
    """Write one `{"elements": [...]}` record per line, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        for layout in layouts:
            record = {
                "elements": [
                    {"c": el.c, "x": el.x, "y": el.y, "w": el.w, "h": el.h}
                    for el in layout.elements
                ]
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def load_jsonl(
    path: str | Path,
    max_elements: int | None = None,
    num_categories: int | None = None,
    num_bins: int | None = None,
) -> list[Layout]:
    """Read layouts back, optionally validating ranges; errors name the line."""
    layouts = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                elements = [
                    Element(int(e["c"]), int(e["x"]), int(e["y"]), int(e["w"]), int(e["h"]))
                    for e in record["elements"]
                ]
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed layout record ({exc})") from exc
            if max_elements is not None and len(elements) > max_elements:
                raise DataError(
                    f"{path}:{lineno}: {len(elements)} elements exceeds limit {max_elements}"
                )
            for e in elements:
                if num_categories is not None and not 0 <= e.c < num_categories:
                    raise DataError(f"{path}:{lineno}: category {e.c} out of range")
                if num_bins is not None and not all(
                    0 <= v < num_bins for v in (e.x, e.y, e.w, e.h)
                ):
                    raise DataError(f"{path}:{lineno}: geometry bin out of range")
            layouts.append(Layout(elements))
    return layouts


def split(
    dataset: list[Layout], ratios: tuple[float, float, float], seed: int
) -> tuple[list[Layout], list[Layout], list[Layout]]:
    """Seed-deterministic disjoint exhaustive (train, val, test) split."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")
    if any(r < 0 for r in ratios):
        raise DataError("ratios must be non-negative")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    edges = [int(round(c * n)) for c in np.cumsum(ratios)]
    edges[-1] = n
    parts = []
    start = 0
    for ratio, stop in zip(ratios, edges):
        if n > 0 and ratio > 0 and stop - start == 0:
            raise DataError(f"split ratio {ratio} produced an empty part")
        parts.append([dataset[i] for i in order[start:stop]])
        start = stop
    return parts[0], parts[1], parts[2]


def dataset_manifest(layouts: list[Layout], cfg: SynthConfig, config_hash: str) -> dict:
    counts = [len(l) for l in layouts]
    return {
        "samples": len(layouts),
        "elements_total": int(np.sum(counts)) if counts else 0,
        "elements_min": int(np.min(counts)) if counts else 0,
        "elements_max": int(np.max(counts)) if counts else 0,
        "grammar": cfg.grammar,
        "seed": cfg.seed,
        "config_hash": config_hash,
    }
