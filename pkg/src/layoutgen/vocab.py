"""Quantized layout representation and the shared token vocabulary.

A layout is a set of elements ``(c, x, y, w, h)`` where ``c`` is a category
index and the four geometric attributes are bin indices on a unit canvas.
All five attributes live in one shared id space of ``C + B`` regular classes
followed by two special tokens:

    ids 0 .. C-1        categories
    ids C .. C+B-1      geometry bins (x, y, w, h share the same B ids)
    id  C+B             PAD  (fills unused element slots)
    id  C+B+1           MASK (the absorbing corruption state)

A layout with up to ``n_max`` elements flattens to exactly ``5 * n_max``
token ids, PAD-filled on the right.  Element order carries no meaning; all
downstream consumers treat sequences as sets of 5-token groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FIELDS = ("c", "x", "y", "w", "h")
TOKENS_PER_ELEMENT = 5


class VocabError(ValueError):
    """Raised for out-of-range attributes or malformed token sequences."""


@dataclass(frozen=True)
class Vocabulary:
    """Shared token space over categories, geometry bins, PAD and MASK."""

    num_categories: int
    num_bins: int

    def __post_init__(self):
        if self.num_categories < 1 or self.num_bins < 1:
            raise VocabError("num_categories and num_bins must be >= 1")

    @property
    def num_regular(self) -> int:
        """Count of regular (non-special) classes: categories plus bins."""
        return self.num_categories + self.num_bins

    @property
    def pad_id(self) -> int:
        return self.num_regular

    @property
    def mask_id(self) -> int:
        return self.num_regular + 1

    @property
    def size(self) -> int:
        """Total class count including PAD and MASK."""
        return self.num_regular + 2

    def geometry_token(self, bin_index: int) -> int:
        if not 0 <= bin_index < self.num_bins:
            raise VocabError(f"bin index {bin_index} outside [0, {self.num_bins})")
        return self.num_categories + bin_index

    def field_of_position(self, position: int) -> str:
        return FIELDS[position % TOKENS_PER_ELEMENT]

    def legal_ids(self, fieldname: str) -> frozenset[int]:
        """Legal regular+PAD ids for one field (MASK is never field-legal)."""
        if fieldname == "c":
            return frozenset(range(self.num_categories)) | {self.pad_id}
        if fieldname in ("x", "y", "w", "h"):
            lo = self.num_categories
            return frozenset(range(lo, lo + self.num_bins)) | {self.pad_id}
        raise VocabError(f"unknown field {fieldname!r}")

    def legality_matrix(self, n_max: int) -> np.ndarray:
        """Boolean (5*n_max, size) matrix: legal[p, v] for field-at-p.

        MASK is marked illegal everywhere; callers that need it during
        diffusion re-enable the MASK column explicitly.
        """
        legal = np.zeros((TOKENS_PER_ELEMENT * n_max, self.size), dtype=bool)
        for f_idx, fieldname in enumerate(FIELDS):
            ids = sorted(self.legal_ids(fieldname))
            legal[f_idx::TOKENS_PER_ELEMENT, ids] = True
        return legal


@dataclass(frozen=True)
class Element:
    """One layout element: category plus binned center position and size."""

    c: int
    x: int
    y: int
    w: int
    h: int

    def validate(self, vocab: Vocabulary) -> None:
        if not 0 <= self.c < vocab.num_categories:
            raise VocabError(f"category {self.c} outside [0, {vocab.num_categories})")
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not 0 <= v < vocab.num_bins:
                raise VocabError(f"{name}={v} outside [0, {vocab.num_bins})")


@dataclass
class Layout:
    """An order-agnostic collection of elements."""

    elements: list[Element] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.elements)

    def validate(self, vocab: Vocabulary) -> None:
        for el in self.elements:
            el.validate(vocab)


@dataclass
class TokenSeq:
    """A flattened layout: exactly ``5 * n_max`` token ids.

    ``element_count`` counts fully non-PAD element slots; mixed slots are
    legal only in intermediate diffusion states, never at t=0.
    """

    tokens: np.ndarray
    n_max: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.shape != (TOKENS_PER_ELEMENT * self.n_max,):
            raise VocabError(
                f"token array must have shape ({TOKENS_PER_ELEMENT * self.n_max},), "
                f"got {self.tokens.shape}"
            )

    def element_count(self, vocab: Vocabulary) -> int:
        groups = self.tokens.reshape(self.n_max, TOKENS_PER_ELEMENT)
        return int(np.sum(~np.all(groups == vocab.pad_id, axis=1)))


def tokenize(layout: Layout, vocab: Vocabulary, n_max: int) -> TokenSeq:
    """Flatten a layout into a PAD-filled sequence of ``5 * n_max`` ids."""
    if len(layout) > n_max:
        raise VocabError(f"layout has {len(layout)} elements, limit is {n_max}")
    layout.validate(vocab)
    tokens = np.full(TOKENS_PER_ELEMENT * n_max, vocab.pad_id, dtype=np.int64)
    for i, el in enumerate(layout.elements):
        base = TOKENS_PER_ELEMENT * i
        tokens[base] = el.c
        tokens[base + 1] = vocab.geometry_token(el.x)
        tokens[base + 2] = vocab.geometry_token(el.y)
        tokens[base + 3] = vocab.geometry_token(el.w)
        tokens[base + 4] = vocab.geometry_token(el.h)
    return TokenSeq(tokens, n_max)


def detokenize(seq: TokenSeq, vocab: Vocabulary) -> Layout:
    """Inverse of :func:`tokenize`.

    Rejects sequences containing MASK, mixed PAD/non-PAD element slots, or
    field-illegal tokens; those states are valid mid-diffusion but not as
    final outputs.
    """
    tokens = seq.tokens
    if np.any(tokens == vocab.mask_id):
        pos = int(np.argmax(tokens == vocab.mask_id))
        raise VocabError(f"residual MASK token at position {pos}")
    elements = []
    groups = tokens.reshape(seq.n_max, TOKENS_PER_ELEMENT)
    for i, group in enumerate(groups):
        pad_flags = group == vocab.pad_id
        if pad_flags.all():
            continue
        if pad_flags.any():
            raise VocabError(f"element slot {i} mixes PAD and regular tokens")
        c, gx, gy, gw, gh = (int(v) for v in group)
        if not 0 <= c < vocab.num_categories:
            raise VocabError(f"slot {i}: token {c} is not a category id")
        geo = []
        for fieldname, val in zip(("x", "y", "w", "h"), (gx, gy, gw, gh)):
            if not vocab.num_categories <= val < vocab.num_regular:
                raise VocabError(f"slot {i}: token {val} illegal for field {fieldname}")
            geo.append(val - vocab.num_categories)
        elements.append(Element(c, *geo))
    return Layout(elements)


def dequantize(el: Element, vocab: Vocabulary) -> tuple[float, float, float, float]:
    """Map bin indices to continuous ``(cx, cy, w, h)`` by bin centers.

    Bin ``b`` out of ``B`` maps to ``(b + 0.5) / B`` for every geometric
    field, so equal bins always dequantize to equal floats.
    """
    el.validate(vocab)
    b = float(vocab.num_bins)
    return ((el.x + 0.5) / b, (el.y + 0.5) / b, (el.w + 0.5) / b, (el.h + 0.5) / b)


def quantize(cx: float, cy: float, w: float, h: float, vocab: Vocabulary) -> tuple[int, int, int, int]:
    """Nearest-bin inverse of :func:`dequantize`, clamped to the bin range."""
    b = vocab.num_bins

    def to_bin(v: float) -> int:
        return int(np.clip(np.floor(v * b), 0, b - 1))

    return (to_bin(cx), to_bin(cy), to_bin(w), to_bin(h))


def element_box(el: Element, vocab: Vocabulary) -> tuple[float, float, float, float]:
    """Continuous ``(left, top, right, bottom)`` of an element, clamped to the canvas."""
    cx, cy, w, h = dequantize(el, vocab)
    left = max(0.0, cx - w / 2)
    top = max(0.0, cy - h / 2)
    right = min(1.0, cx + w / 2)
    bottom = min(1.0, cy + h / 2)
    return (left, top, right, bottom)
