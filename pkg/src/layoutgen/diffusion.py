"""Transition algebra for the absorbing-state discrete diffusion.

All distributions here are plain float64 numpy arrays over the ``K+2``
classes (K regular, PAD, MASK) of a :class:`~layoutgen.vocab.Vocabulary`.
Matrices follow the convention ``Q[next, prev]``: the column of a start
token is its one-step outgoing distribution and sums to one, so the t-step
marginal is the matrix-vector product ``Q_bar_t @ onehot(z0)``.

Everything that the samplers and losses need is computed from the closed
form of the cumulative kernel (see :mod:`layoutgen.schedule`); explicit
matrix products appear only in tests as the independent oracle.
"""

from __future__ import annotations

import numpy as np

from .schedule import DiffusionSchedule

PROB_FLOOR = 1e-30  # guard against division by structurally-zero masses


class DiffusionError(ValueError):
    """Raised for inconsistent conditioning inputs."""


def _scalar_or_column(values: np.ndarray, t) -> np.ndarray | float:
    """Index a per-t array with a scalar t or a batch of per-row ts."""
    t_arr = np.asarray(t)
    if t_arr.ndim == 0:
        return float(values[int(t_arr)])
    return values[t_arr][:, None]


def effective_kernel(s: DiffusionSchedule, t_hi: int, t_lo: int):
    """(keep, replace-per-class, absorb) of the kernel from t_lo to t_hi.

    For ``t_lo = t_hi - 1`` this reproduces the per-step probabilities; for
    ``t_lo = 0`` the cumulative ones.
    """
    if not 0 <= t_lo <= t_hi <= s.T:
        raise DiffusionError(f"need 0 <= t_lo <= t_hi <= T, got ({t_lo}, {t_hi})")
    keep = s.alpha_bar[t_hi] / s.alpha_bar[t_lo]
    absorb = 1.0 - (1.0 - s.gamma_bar[t_hi]) / (1.0 - s.gamma_bar[t_lo])
    replace = (1.0 - keep - absorb) / s.num_regular_plus_pad
    return keep, max(replace, 0.0), absorb


def transition_matrix(s: DiffusionSchedule, t: int) -> np.ndarray:
    """One-step kernel ``Q_t[next, prev]`` of shape (K+2, K+2).

    The regular+PAD block is ``alpha * I + beta * ones``; every non-MASK
    column sends ``gamma`` to MASK, and the MASK column is absorbing.
    """
    if not 1 <= t <= s.T:
        raise DiffusionError(f"t={t} outside [1, {s.T}]")
    kp1 = s.num_regular_plus_pad
    size = kp1 + 1
    q = np.zeros((size, size), dtype=np.float64)
    q[:kp1, :kp1] = s.beta[t]
    q[np.arange(kp1), np.arange(kp1)] += s.alpha[t]
    q[kp1, :kp1] = s.gamma[t]
    q[kp1, kp1] = 1.0
    return q


def cumulative_marginal(s: DiffusionSchedule, t: int, z0: int) -> np.ndarray:
    """Closed-form ``q(z_t | z0)`` over all K+2 classes."""
    kp1 = s.num_regular_plus_pad
    if z0 == kp1:
        raise DiffusionError("z0 may not be MASK")
    if not 0 <= z0 < kp1:
        raise DiffusionError(f"z0={z0} outside the regular+PAD range")
    if not 0 <= t <= s.T:
        raise DiffusionError(f"t={t} outside [0, {s.T}]")
    probs = np.full(kp1 + 1, s.beta_bar[t], dtype=np.float64)
    probs[z0] += s.alpha_bar[t]
    probs[kp1] = s.gamma_bar[t]
    return probs


def forward_sample(
    tokens: np.ndarray, t, s: DiffusionSchedule, rng: np.random.Generator
) -> np.ndarray:
    """Sample ``z_t ~ q(z_t | z0)`` independently per position.

    ``tokens`` may be any integer array of regular/PAD ids; ``t`` is a scalar
    or an array matching the leading axis for per-row timesteps.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    kp1 = s.num_regular_plus_pad
    keep = _scalar_or_column(s.alpha_bar, t)
    absorb = _scalar_or_column(s.gamma_bar, t)
    u = rng.random(tokens.shape)
    replacement = rng.integers(0, kp1, size=tokens.shape, dtype=np.int64)
    out = np.where(u < keep, tokens, np.where(u < keep + absorb, kp1, replacement))
    return out


def posterior(
    s: DiffusionSchedule, z_t: int, z0: int, t: int, step: int = 1
) -> np.ndarray:
    """Closed-form ``q(z_{t-step} | z_t, z0)`` over all K+2 classes."""
    kp1 = s.num_regular_plus_pad
    mask = kp1
    if z0 == mask:
        raise DiffusionError("z0 may not be MASK")
    if step < 1 or t - step < 0 or t > s.T:
        raise DiffusionError(f"invalid (t={t}, step={step})")
    t_lo = t - step
    keep, replace, absorb = effective_kernel(s, t, t_lo)
    prev = cumulative_marginal(s, t_lo, z0)

    out = np.zeros(kp1 + 1, dtype=np.float64)
    if z_t == mask:
        out[:kp1] = absorb * prev[:kp1]
        out[mask] = prev[mask]
    else:
        out[:kp1] = replace * prev[:kp1]
        out[z_t] += keep * prev[z_t]
        out[mask] = 0.0
    total = out.sum()
    if total < PROB_FLOOR:
        raise DiffusionError(
            f"zero-probability conditioning pair: q(z_t={z_t} | z0={z0}) = 0 at t={t}"
        )
    return out / total


def reverse_mixture(
    s: DiffusionSchedule,
    denoiser_probs: np.ndarray,
    z_t: np.ndarray,
    t,
    step: int = 1,
) -> np.ndarray:
    """Posterior mixture ``p(z_{t-step} | z_t)`` under noiseless-token weights.

    ``denoiser_probs`` holds per-position distributions over the clean token
    (zero mass on MASK); the result mixes the closed-form posteriors of every
    candidate clean token, weighted by those probabilities.  Shapes:
    ``denoiser_probs`` is (..., K+2) and ``z_t`` is (...,); ``t`` is a scalar
    or an array matching the leading axis for per-row timesteps.
    """
    kp1 = s.num_regular_plus_pad
    mask = kp1
    w = np.asarray(denoiser_probs, dtype=np.float64)
    z = np.asarray(z_t, dtype=np.int64)
    if w.shape[:-1] != z.shape or w.shape[-1] != kp1 + 1:
        raise DiffusionError("denoiser_probs and z_t shapes disagree")
    if np.any(np.abs(w.sum(-1) - 1.0) > 1e-6):
        raise DiffusionError("denoiser probabilities are not normalized")
    if np.any(w[..., mask] > 1e-12):
        raise DiffusionError("denoiser probabilities must give zero mass to MASK")
    t_arr = np.asarray(t, dtype=np.int64)
    if step < 1 or np.any(t_arr - step < 0) or np.any(t_arr > s.T):
        raise DiffusionError(f"invalid (t={t}, step={step})")
    t_lo = t_arr - step

    def per_pos(values: np.ndarray) -> np.ndarray:
        """Broadcast a per-t constant over the position shape of z."""
        if t_arr.ndim == 0:
            return np.float64(values)
        return np.broadcast_to(values.reshape(t_arr.shape + (1,) * (z.ndim - t_arr.ndim)), z.shape)

    keep = per_pos(s.alpha_bar[t_arr] / s.alpha_bar[t_lo])
    absorb = per_pos(1.0 - (1.0 - s.gamma_bar[t_arr]) / (1.0 - s.gamma_bar[t_lo]))
    replace = np.maximum((1.0 - keep - absorb) / kp1, 0.0)
    a_lo, b_lo, g_lo = (per_pos(arr[t_lo]) for arr in (s.alpha_bar, s.beta_bar, s.gamma_bar))
    a_t, b_t, g_t = (per_pos(arr[t_arr]) for arr in (s.alpha_bar, s.beta_bar, s.gamma_bar))

    flat_w = w.reshape(-1, kp1 + 1)
    flat_z = z.reshape(-1)
    flat = {
        name: np.broadcast_to(val, z.shape).reshape(-1)
        for name, val in (
            ("keep", keep), ("replace", replace), ("absorb", absorb),
            ("a_lo", a_lo), ("b_lo", b_lo), ("g_lo", g_lo),
            ("a_t", a_t), ("b_t", b_t), ("g_t", g_t),
        )
    }
    out = np.empty_like(flat_w)

    from_mask = flat_z == mask
    if np.any(from_mask):
        wm = flat_w[from_mask]
        col = lambda name: flat[name][from_mask][:, None]
        block = col("absorb") * (col("b_lo") + col("a_lo") * wm) / col("g_t")
        block[:, mask] = (flat["g_lo"][from_mask] / flat["g_t"][from_mask])
        out[from_mask] = block

    if np.any(~from_mask):
        wr = flat_w[~from_mask]
        zr = flat_z[~from_mask]
        rows = np.arange(len(zr))
        col = lambda name: flat[name][~from_mask][:, None]
        b_t_r, a_t_r = col("b_t"), col("a_t")
        u = wr / np.maximum(b_t_r, PROB_FLOOR)
        u[rows, zr] = wr[rows, zr] / (b_t_r[:, 0] + a_t_r[:, 0])
        base = col("b_lo") * u.sum(-1, keepdims=True) + col("a_lo") * u
        block = col("replace") * base
        block[rows, zr] += flat["keep"][~from_mask] * base[rows, zr]
        block[:, mask] = 0.0
        block /= np.maximum(block.sum(-1, keepdims=True), PROB_FLOOR)
        out[~from_mask] = block

    return out.reshape(w.shape)


def posterior_batch(
    s: DiffusionSchedule, z_t: np.ndarray, z0: np.ndarray, t: np.ndarray, step: int = 1
) -> np.ndarray:
    """Vectorized closed-form ``q(z_{t-step} | z_t, z0)``.

    ``z_t`` and ``z0`` are (B, L) integer arrays and ``t`` is a (B,) array of
    per-row timesteps with ``t - step >= 0``; returns (B, L, K+2).
    """
    kp1 = s.num_regular_plus_pad
    mask = kp1
    z_t = np.asarray(z_t, dtype=np.int64)
    z0 = np.asarray(z0, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    if np.any(z0 == mask):
        raise DiffusionError("z0 may not contain MASK")
    if np.any(t - step < 0) or np.any(t > s.T):
        raise DiffusionError("timesteps out of range for the requested step")
    t_lo = t - step

    keep = (s.alpha_bar[t] / s.alpha_bar[t_lo])[:, None, None]
    absorb = (1.0 - (1.0 - s.gamma_bar[t]) / (1.0 - s.gamma_bar[t_lo]))[:, None, None]
    replace = np.maximum((1.0 - keep - absorb) / kp1, 0.0)
    a_lo = s.alpha_bar[t_lo][:, None, None]
    b_lo = s.beta_bar[t_lo][:, None, None]
    g_lo = s.gamma_bar[t_lo][:, None, None]

    eye = np.eye(kp1 + 1)
    oh_z0 = eye[z0]
    oh_zt = eye[z_t]
    prev = b_lo + a_lo * oh_z0
    prev[..., mask] = np.broadcast_to(g_lo, prev.shape[:-1] + (1,))[..., 0]

    from_mask = (z_t == mask)[..., None]
    num_mask = absorb * prev
    num_mask[..., mask] = prev[..., mask]
    num_reg = (replace + keep * oh_zt) * prev
    num_reg[..., mask] = 0.0
    out = np.where(from_mask, num_mask, num_reg)
    totals = out.sum(-1, keepdims=True)
    if np.any(totals < PROB_FLOOR):
        raise DiffusionError("zero-probability conditioning pair in batch posterior")
    return out / totals


def reverse_distribution(
    denoiser_probs: np.ndarray, z_t: np.ndarray, t: int, s: DiffusionSchedule
) -> np.ndarray:
    """Single-step reverse distribution ``p(z_{t-1} | z_t)``."""
    return reverse_mixture(s, denoiser_probs, z_t, t, step=1)


def fast_reverse_distribution(
    denoiser_probs: np.ndarray, z_t: np.ndarray, t: int, step: int, s: DiffusionSchedule
) -> np.ndarray:
    """Strided reverse distribution ``p(z_{t-step} | z_t)`` for fast sampling."""
    if step < 1:
        raise DiffusionError("step must be >= 1")
    if t - step < 0:
        raise DiffusionError(f"step {step} overshoots t={t}")
    return reverse_mixture(s, denoiser_probs, z_t, t, step=step)


def renormalize_non_mask(probs: np.ndarray, mask_id: int) -> np.ndarray:
    """Zero the MASK class and renormalize; used to draw mask-free samples."""
    out = np.array(probs, dtype=np.float64, copy=True)
    out[..., mask_id] = 0.0
    totals = out.sum(-1, keepdims=True)
    if np.any(totals < PROB_FLOOR):
        raise DiffusionError("distribution has no non-MASK mass to renormalize")
    return out / totals


def apply_legality(
    probs: np.ndarray, legal: np.ndarray, mask_id: int, allow_mask: bool
) -> np.ndarray:
    """Zero field-illegal classes (optionally keeping MASK) and renormalize.

    ``legal`` is the (L, K+2) boolean matrix from
    :meth:`~layoutgen.vocab.Vocabulary.legality_matrix`, broadcast over any
    leading batch axes of ``probs``.
    """
    gate = legal.copy()
    if allow_mask:
        gate[:, mask_id] = True
    out = np.where(gate, probs, 0.0)
    totals = out.sum(-1, keepdims=True)
    if np.any(totals < PROB_FLOOR):
        raise DiffusionError("legality mask removed all probability mass")
    return out / totals


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one index per row of a (..., V) probability array."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])
    idx = (u[..., None] > cdf).sum(-1)
    return np.minimum(idx, probs.shape[-1] - 1).astype(np.int64)
