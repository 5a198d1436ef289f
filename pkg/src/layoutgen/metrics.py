"""Layout quality metrics and the handcrafted feature map.

The Fréchet distance, precision and recall operate on fixed-length feature
vectors from the versioned ``geo-v1`` map below; distances computed in this
space are reported as "Fréchet-geo" and are not comparable to scores from
learned feature extractors.  Alignment, overlap and maximum-IoU work on the
layouts directly.  Every metric is permutation-invariant over elements and
over sample order.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.spatial.distance

from .vocab import Layout, Vocabulary, dequantize, element_box

FEATURE_MAP_VERSION = "geo-v1"


# ---------------------------------------------------------------------------
# geometry helpers

def _boxes(layout: Layout, vocab: Vocabulary) -> np.ndarray:
    """(N, 4) array of continuous (left, top, right, bottom)."""
    if not layout.elements:
        return np.zeros((0, 4))
    return np.array([element_box(el, vocab) for el in layout.elements])


def _alignment_axes(boxes: np.ndarray) -> np.ndarray:
    """(N, 6) array of the comparable axis values: xL, xC, xR, yT, yC, yB."""
    left, top, right, bottom = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return np.stack(
        [left, (left + right) / 2, right, top, (top + bottom) / 2, bottom], axis=1
    )


def _min_alignment_distances(boxes: np.ndarray) -> np.ndarray:
    """Per element, the minimum same-axis distance to any other element."""
    n = len(boxes)
    if n < 2:
        return np.zeros(n)
    axes = _alignment_axes(boxes)
    diff = np.abs(axes[:, None, :] - axes[None, :, :])  # (N, N, 6)
    diff[np.arange(n), np.arange(n), :] = np.inf
    return diff.min(axis=(1, 2))


def _pairwise_overlap_total(boxes: np.ndarray) -> float:
    """Sum of intersection areas over unordered element pairs."""
    n = len(boxes)
    if n < 2:
        return 0.0
    l, t, r, b = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    iw = np.minimum(r[:, None], r[None, :]) - np.maximum(l[:, None], l[None, :])
    ih = np.minimum(b[:, None], b[None, :]) - np.maximum(t[:, None], t[None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    return float(np.triu(inter, k=1).sum())


# ---------------------------------------------------------------------------
# scalar metrics

def alignment_score(layouts: list[Layout], vocab: Vocabulary) -> float:
    """Mean per-layout misalignment, zero for perfectly grid-aligned layouts.

    For each element the distance to the nearest same-axis edge or center of
    any other element is taken; a layout scores the average of
    ``-log(1 - d_min)`` over its elements.  Single-element layouts score 0.
    The conventional 100x display scaling is applied at report time only.
    """
    scores = []
    for layout in layouts:
        boxes = _boxes(layout, vocab)
        if len(boxes) < 2:
            scores.append(0.0)
            continue
        d = np.clip(_min_alignment_distances(boxes), 0.0, 1.0 - 1e-12)
        scores.append(float(np.mean(-np.log1p(-d))))
    return float(np.mean(scores)) if scores else 0.0


def overlap_score(layouts: list[Layout], vocab: Vocabulary) -> float:
    """Mean total pairwise intersection area, normalized by the unit canvas."""
    if not layouts:
        return 0.0
    return float(np.mean([_pairwise_overlap_total(_boxes(l, vocab)) for l in layouts]))


def _iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    l = np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    t = np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    r = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2])
    b = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3])
    inter = np.clip(r - l, 0.0, None) * np.clip(b - t, 0.0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def layout_pair_iou(gen: Layout, ref: Layout, vocab: Vocabulary) -> float:
    """Max mean IoU between two layouts under same-category element matching.

    Within each shared category, elements are matched by an exact assignment
    solver; unmatched elements count as zero via the ``max(N_gen, N_ref)``
    denominator, so identical layouts score exactly 1.
    """
    if not gen.elements or not ref.elements:
        return 0.0
    cats = {e.c for e in gen.elements} & {e.c for e in ref.elements}
    total = 0.0
    for cat in cats:
        ga = _boxes(Layout([e for e in gen.elements if e.c == cat]), vocab)
        rb = _boxes(Layout([e for e in ref.elements if e.c == cat]), vocab)
        iou = _iou_matrix(ga, rb)
        rows, cols = scipy.optimize.linear_sum_assignment(-iou)
        total += float(iou[rows, cols].sum())
    return total / max(len(gen.elements), len(ref.elements))


def max_iou(
    generated: list[Layout], reference: list[Layout], vocab: Vocabulary
) -> float:
    """Mean layout-pair IoU under an optimal generated-to-reference pairing."""
    if not generated or not reference:
        raise ValueError("max_iou needs non-empty layout sets")
    scores = np.array(
        [[layout_pair_iou(g, r, vocab) for r in reference] for g in generated]
    )
    rows, cols = scipy.optimize.linear_sum_assignment(-scores)
    return float(scores[rows, cols].mean())


def precision_recall(
    gen_features: np.ndarray, real_features: np.ndarray, k: int = 3
) -> tuple[float, float]:
    """Manifold precision/recall from k-NN radii.

    Precision is the fraction of generated points lying within the k-NN
    radius of at least one real point; recall swaps the roles.
    """
    gen = np.asarray(gen_features, dtype=np.float64)
    real = np.asarray(real_features, dtype=np.float64)
    if len(gen) < k + 1 or len(real) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} samples on each side")

    def knn_radii(points: np.ndarray) -> np.ndarray:
        d = scipy.spatial.distance.cdist(points, points)
        return np.sort(d, axis=1)[:, k]  # k-th neighbor, self excluded at col 0

    cross = scipy.spatial.distance.cdist(gen, real)
    precision = float((cross <= knn_radii(real)[None, :]).any(axis=1).mean())
    recall = float((cross <= knn_radii(gen)[:, None]).any(axis=0).mean())
    return precision, recall


def frechet_distance(gen_features: np.ndarray, real_features: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature clouds.

    The trace of the matrix square root is evaluated by eigendecomposition of
    the symmetrized product with negative eigenvalues clipped at zero; sides
    with fewer than dim+1 samples get a 1e-6 ridge on the covariance.
    """
    x = np.asarray(gen_features, dtype=np.float64)
    y = np.asarray(real_features, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError("feature arrays must be 2-D with matching dimension")
    dim = x.shape[1]
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cov_x = np.atleast_2d(np.cov(x, rowvar=False))
    cov_y = np.atleast_2d(np.cov(y, rowvar=False))
    if len(x) < dim + 1:
        cov_x = cov_x + 1e-6 * np.eye(dim)
    if len(y) < dim + 1:
        cov_y = cov_y + 1e-6 * np.eye(dim)

    sqrt_x = _psd_sqrt(cov_x)
    inner = sqrt_x @ cov_y @ sqrt_x
    eigvals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sum(np.sqrt(np.clip(eigvals, 0.0, None)))
    d = float(np.sum((mu_x - mu_y) ** 2) + np.trace(cov_x) + np.trace(cov_y) - 2 * tr_sqrt)
    return max(d, 0.0)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


# ---------------------------------------------------------------------------
# feature map

def feature_dim(vocab: Vocabulary) -> int:
    return 2 + vocab.num_categories + 8 + 3


def layout_features(layout: Layout, vocab: Vocabulary, n_max: int = 8) -> np.ndarray:
    """The ``geo-v1`` feature vector of one layout.

    Concatenates element count, category histogram, first and second moments
    of the dequantized attributes, mean element area, total pairwise overlap
    and mean nearest-axis alignment distance.  Deterministic and permutation
    invariant; empty layouts map to the zero vector.
    """
    c = vocab.num_categories
    out = np.zeros(feature_dim(vocab))
    n = len(layout.elements)
    if n == 0:
        return out
    geo = np.array([dequantize(el, vocab) for el in layout.elements])  # (N, 4)
    cats = np.array([el.c for el in layout.elements])
    boxes = _boxes(layout, vocab)

    out[0] = n / n_max
    out[1] = 1.0  # non-empty indicator, keeps all-PAD output distinguishable
    hist = np.bincount(cats, minlength=c)[:c] / n
    out[2 : 2 + c] = hist
    out[2 + c : 6 + c] = geo.mean(axis=0)
    out[6 + c : 10 + c] = geo.std(axis=0)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    out[10 + c] = areas.mean()
    out[11 + c] = _pairwise_overlap_total(boxes)
    out[12 + c] = float(np.clip(_min_alignment_distances(boxes), 0, 1).mean())
    return out


def features_of(layouts: list[Layout], vocab: Vocabulary, n_max: int = 8) -> np.ndarray:
    return np.stack([layout_features(l, vocab, n_max) for l in layouts])


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricReport:
    frechet: float
    precision: float
    recall: float
    alignment: float
    overlap: float
    max_iou: float
    n_generated: int
    n_reference: int
    config_hash: str = ""

    def as_dict(self) -> dict:
        d = asdict(self)
        d["alignment_x100"] = self.alignment * 100.0
        d["feature_map"] = FEATURE_MAP_VERSION
        return d


def evaluate(
    generated: list[Layout],
    reference: list[Layout],
    vocab: Vocabulary,
    n_max: int = 8,
    k: int = 3,
    max_iou_cap: int = 200,
    config_hash: str = "",
) -> MetricReport:
    """Full metric report of a generated set against a reference set.

    ``max_iou_cap`` bounds the assignment size for the IoU pairing, which is
    cubic in the number of layouts; both sets are truncated to it.
    """
    if not generated or not reference:
        raise ValueError("evaluate needs non-empty layout sets")
    gen_f = features_of(generated, vocab, n_max)
    ref_f = features_of(reference, vocab, n_max)
    precision, recall = precision_recall(gen_f, ref_f, k=k)
    report = MetricReport(
        frechet=frechet_distance(gen_f, ref_f),
        precision=precision,
        recall=recall,
        alignment=alignment_score(generated, vocab),
        overlap=overlap_score(generated, vocab),
        max_iou=max_iou(generated[:max_iou_cap], reference[:max_iou_cap], vocab),
        n_generated=len(generated),
        n_reference=len(reference),
        config_hash=config_hash,
    )
    return report
