"""Diagnostic experiment harnesses.

Each harness takes trained models plus tokenized layouts and returns plain
row dictionaries ready for CSV serialization:

* ``tsr_curve``: how much of a partially generated state survives the rest
  of the reverse process unchanged, per start timestep (token sticking).
* ``token_correction_success``: recovery rate after overwriting a few
  tokens with MASK versus with other regular tokens.
* ``detection_accuracy``: whether the corrector ranks randomly replaced
  tokens at the bottom of its scores.
* ``score_vs_corruption``: mean corrector score of replaced geometry tokens
  as the replacement distance grows.
* ``speed_quality``: Fréchet-geo at reduced step counts with and without
  the corrector.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import diffusion, metrics
from .corrector import Corrector, score
from .denoiser import Denoiser
from .sampler import SamplerConfig, decode_tokens, generate_batch, reverse_from
from .schedule import DiffusionSchedule
from .vocab import TOKENS_PER_ELEMENT, Vocabulary


def _nonpad_positions(tokens: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    return np.flatnonzero(tokens != vocab.pad_id)


def _random_other_token(
    position: int, original: int, vocab: Vocabulary, rng: np.random.Generator
) -> int:
    """A uniformly random regular token of the position's field, != original."""
    if position % TOKENS_PER_ELEMENT == 0:
        lo, hi = 0, vocab.num_categories
    else:
        lo, hi = vocab.num_categories, vocab.num_regular
    if hi - lo < 2:
        raise ValueError("field needs at least two classes to replace within")
    tok = int(rng.integers(lo, hi - 1))
    return tok + 1 if tok >= original else tok


def tsr_curve(
    den: Denoiser,
    schedule: DiffusionSchedule,
    z0: np.ndarray,
    t_grid: list[int],
    rng: np.random.Generator,
    delta: int = 1,
) -> list[dict]:
    """Token sticking rate per start timestep.

    For each t the clean batch is forward-corrupted to z_t and the reverse
    process runs to completion; TSR(t) pools, over the batch, the fraction of
    non-MASK tokens of z_t left unchanged at t=0.  TSR(0) is 1 by definition.
    """
    vocab = den.cfg.vocab
    rows = []
    for t in t_grid:
        if t == 0:
            rows.append({"t": 0, "tsr": 1.0, "survivors": int(np.prod(z0.shape))})
            continue
        z_t = diffusion.forward_sample(z0, t, schedule, rng)
        final = reverse_from(den, schedule, z_t, t, rng, delta=delta)
        alive = z_t != vocab.mask_id
        n_alive = int(alive.sum())
        unchanged = int((final[alive] == z_t[alive]).sum()) if n_alive else 0
        rows.append(
            {
                "t": int(t),
                "tsr": unchanged / n_alive if n_alive else 1.0,
                "survivors": n_alive,
            }
        )
    return rows


def token_correction_success(
    den: Denoiser,
    schedule: DiffusionSchedule,
    z0: np.ndarray,
    mode: str,
    rng: np.random.Generator,
    t_start: int = 10,
    n_replace: int = 3,
    trials: int = 500,
    batch: int = 250,
) -> dict:
    """Recovery rate after replacing tokens with MASK or with other tokens.

    Each trial overwrites ``n_replace`` random non-PAD positions of one clean
    layout, runs the reverse process from ``t_start``, and succeeds only if
    every overwritten position recovered its original token.  ``n_replace=0``
    succeeds by convention.
    """
    if mode not in ("mask-replace", "token-replace"):
        raise ValueError("mode must be 'mask-replace' or 'token-replace'")
    vocab = den.cfg.vocab
    if n_replace == 0:
        return {"mode": mode, "success_rate": 1.0, "trials": trials, "successes": trials}

    successes = 0
    done = 0
    while done < trials:
        size = min(batch, trials - done)
        states = np.empty((size, z0.shape[1]), dtype=np.int64)
        originals = np.empty((size, n_replace), dtype=np.int64)
        positions = np.empty((size, n_replace), dtype=np.int64)
        for i in range(size):
            row = z0[int(rng.integers(0, len(z0)))].copy()
            pos = rng.choice(_nonpad_positions(row, vocab), size=n_replace, replace=False)
            originals[i] = row[pos]
            positions[i] = pos
            for j, p in enumerate(pos):
                if mode == "mask-replace":
                    row[p] = vocab.mask_id
                else:
                    row[p] = _random_other_token(int(p), int(row[p]), vocab, rng)
            states[i] = row
        final = reverse_from(den, schedule, states, t_start, rng)
        recovered = np.take_along_axis(final, positions, axis=1) == originals
        successes += int(recovered.all(axis=1).sum())
        done += size
    return {
        "mode": mode,
        "success_rate": successes / trials,
        "trials": trials,
        "successes": successes,
    }


def detection_accuracy(
    cor: Corrector,
    z0: np.ndarray,
    rng: np.random.Generator,
    n_replace: int = 3,
    t_cond: int = 10,
    trials: int | None = None,
) -> dict:
    """How often replaced tokens land in the bottom-``n_replace`` scores.

    Replacements and the ranking are both restricted to non-PAD positions.
    ``chance`` is the analytic level of a random ranker, averaged over the
    per-layout position counts.
    """
    vocab = cor.cfg.vocab
    trials = trials if trials is not None else len(z0)
    states = np.empty((trials, z0.shape[1]), dtype=np.int64)
    replaced_at = np.empty((trials, n_replace), dtype=np.int64)
    candidates = []
    chance_terms = []
    for i in range(trials):
        row = z0[int(rng.integers(0, len(z0)))].copy()
        nonpad = _nonpad_positions(row, vocab)
        if len(nonpad) < n_replace:
            raise ValueError("layout too small for the requested replacements")
        pos = rng.choice(nonpad, size=n_replace, replace=False)
        for p in pos:
            row[p] = _random_other_token(int(p), int(row[p]), vocab, rng)
        states[i] = row
        replaced_at[i] = np.sort(pos)
        candidates.append(nonpad)
        chance_terms.append(n_replace / len(nonpad))

    scores = score(cor, states, t_cond)
    hits = 0
    for i in range(trials):
        cand = candidates[i]
        order = cand[np.argsort(scores[i, cand], kind="stable")]
        bottom = set(map(int, order[:n_replace]))
        hits += len(bottom & set(map(int, replaced_at[i])))
    return {
        "accuracy": hits / (trials * n_replace),
        "chance": float(np.mean(chance_terms)),
        "trials": trials,
        "t": t_cond,
    }


def score_vs_corruption(
    cor: Corrector,
    z0: np.ndarray,
    caps: list[int],
    rng: np.random.Generator,
    n_replace: int = 3,
    t_cond: int = 10,
    trials: int = 500,
) -> list[dict]:
    """Mean corrector score of replaced geometry tokens per disruption cap.

    For each cap the replacement bin is drawn within ``±cap`` of the original
    (clamped to the bin range, never equal unless cap=0); clean-token scores
    from the same corrupted layouts are reported alongside.
    """
    vocab = cor.cfg.vocab
    rows = []
    for cap in caps:
        states = np.empty((trials, z0.shape[1]), dtype=np.int64)
        replaced_mask = np.zeros((trials, z0.shape[1]), dtype=bool)
        nonpad_mask = np.zeros((trials, z0.shape[1]), dtype=bool)
        for i in range(trials):
            row = z0[int(rng.integers(0, len(z0)))].copy()
            nonpad = _nonpad_positions(row, vocab)
            geo = nonpad[nonpad % TOKENS_PER_ELEMENT != 0]
            pos = rng.choice(geo, size=min(n_replace, len(geo)), replace=False)
            for p in pos:
                b = int(row[p]) - vocab.num_categories
                lo = max(0, b - cap)
                hi = min(vocab.num_bins - 1, b + cap)
                choices = [v for v in range(lo, hi + 1) if v != b]
                if choices:
                    row[p] = vocab.num_categories + int(rng.choice(choices))
            states[i] = row
            replaced_mask[i, pos] = True
            nonpad_mask[i, nonpad] = True
        scores = score(cor, states, t_cond)
        clean_mask = nonpad_mask & ~replaced_mask
        rows.append(
            {
                "cap": int(cap),
                "replaced_mean": float(scores[replaced_mask].mean()),
                "clean_mean": float(scores[clean_mask].mean()),
                "trials": trials,
                "t": t_cond,
            }
        )
    return rows


def speed_quality(
    den: Denoiser,
    cor: Corrector | None,
    schedule: DiffusionSchedule,
    steps_list: list[int],
    reference: list,
    n_samples: int,
    base_cfg: SamplerConfig,
    seed: int = 0,
) -> list[dict]:
    """Fréchet-geo across step counts, with and without the corrector."""
    vocab = den.cfg.vocab
    ref_features = metrics.features_of(reference, vocab, den.cfg.n_max)
    rows = []
    arms = [("frechet_plain", None)]
    if cor is not None:
        arms.append(("frechet_corrected", cor))
    for steps in steps_list:
        cfg = dataclasses.replace(base_cfg, steps=steps)
        row = {"steps": steps}
        for label, use_cor in arms:
            rng = np.random.default_rng(seed)
            tokens, _ = generate_batch(den, schedule, cfg, rng, n=n_samples, corrector=use_cor)
            layouts = [decode_tokens(r, vocab) for r in tokens]
            feats = metrics.features_of(layouts, vocab, den.cfg.n_max)
            row[label] = metrics.frechet_distance(feats, ref_features)
        rows.append(row)
    return rows
