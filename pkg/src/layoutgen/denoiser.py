"""Trainable denoiser: corrupted tokens at timestep t -> clean-token distributions.

A compact transformer encoder over the ``5 * n_max`` token positions.  Each
position gets a token embedding, a learned embedding of its field within the
element (c/x/y/w/h) and a learned timestep embedding; there is no element
order embedding, so element permutations permute the outputs.  Logits for
MASK and for field-illegal classes are removed before the softmax.

Training uses the hybrid objective: the per-timestep KL between the true
posterior and the model's reverse distribution (a cross-entropy to the data
token at t=1), plus a weighted auxiliary cross-entropy on the clean-token
prediction itself.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import diffusion
from .schedule import DiffusionSchedule
from .vocab import TOKENS_PER_ELEMENT, Vocabulary


@dataclass(frozen=True)
class DenoiserConfig:
    num_categories: int = 5
    num_bins: int = 32
    n_max: int = 8
    T: int = 100
    embed_dim: int = 96
    num_layers: int = 3
    num_heads: int = 4
    ff_dim: int = 192
    dropout: float = 0.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.num_categories, self.num_bins)

    @property
    def seq_len(self) -> int:
        return TOKENS_PER_ELEMENT * self.n_max


@dataclass
class TrainConfig:
    lr: float = 5e-4          # initial rate; cosine-decayed to lr * lr_final_factor
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.01
    batch_size: int = 64
    steps: int = 3500
    lambda_aux: float = 0.1
    lr_final_factor: float = 0.1


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        vocab = cfg.vocab
        self.token_emb = nn.Embedding(vocab.size, cfg.embed_dim)
        self.field_emb = nn.Embedding(TOKENS_PER_ELEMENT, cfg.embed_dim)
        self.time_emb = nn.Embedding(cfg.T + 1, cfg.embed_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.embed_dim,
            nhead=cfg.num_heads,
            dim_feedforward=cfg.ff_dim,
            dropout=cfg.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=cfg.num_layers, enable_nested_tensor=False
        )
        self.out = nn.Linear(cfg.embed_dim, vocab.size)
        # zero-init head: an untrained model predicts uniform-over-legal
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        field_ids = torch.arange(self.cfg.seq_len) % TOKENS_PER_ELEMENT
        self.register_buffer("field_ids", field_ids, persistent=False)
        legal = torch.from_numpy(vocab.legality_matrix(cfg.n_max))
        self.register_buffer("legal", legal, persistent=False)

    def forward(self, tokens: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Raw logits (B, L, K+2); legality is applied in log_probs."""
        x = (
            self.token_emb(tokens)
            + self.field_emb(self.field_ids)[None, :, :]
            + self.time_emb(t)[:, None, :]
        )
        return self.out(self.encoder(x))

    def log_probs(self, tokens: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Log-probabilities with MASK and field-illegal classes removed."""
        logits = self.forward(tokens, t)
        logits = logits.masked_fill(~self.legal[None, :, :], float("-inf"))
        return F.log_softmax(logits, dim=-1)


def denoise(model: Denoiser, tokens: np.ndarray, t) -> np.ndarray:
    """Clean-token distributions for a batch (or one) token sequence.

    Returns float64 probabilities of shape (..., K+2) with zero mass on MASK
    and on field-illegal classes.  Raises on non-finite activations.
    """
    single = np.asarray(tokens).ndim == 1
    arr = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    t_arr = np.full(len(arr), t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t, dtype=np.int64)
    model.eval()
    with torch.no_grad():
        lp = model.log_probs(torch.from_numpy(arr), torch.from_numpy(t_arr))
        probs = lp.exp()
    out = probs.double().cpu().numpy()
    if not np.all(np.isfinite(out)):
        raise RuntimeError("denoiser produced non-finite probabilities")
    return out[0] if single else out


class _ScheduleTensors:
    """Effective kernel constants per stride, in float64, as torch tensors.

    Deriving the per-class replace probability as ``(1 - keep - absorb)/K+1``
    in model precision cancels catastrophically at the 1e-6 scale, so every
    array is assembled in float64 numpy and only then cast.  Index t of a
    stride-``step`` array describes the kernel from t-step to t; entries
    below ``step`` are unused padding.
    """

    def __init__(self, s: DiffusionSchedule):
        self.s = s
        self._cache: dict[tuple, tuple[torch.Tensor, ...]] = {}

    def get(self, device, dtype, step: int = 1):
        key = (device, dtype, step)
        if key not in self._cache:
            s = self.s
            kp1 = s.num_regular_plus_pad
            t = np.arange(s.T + 1)
            lo = np.maximum(t - step, 0)
            keep = s.alpha_bar[t] / s.alpha_bar[lo]
            absorb = 1.0 - (1.0 - s.gamma_bar[t]) / (1.0 - s.gamma_bar[lo])
            replace = np.maximum((1.0 - keep - absorb) / kp1, 0.0)
            arrays = (
                keep, replace, absorb,
                s.alpha_bar[lo], s.beta_bar[lo], s.gamma_bar[lo],
                s.alpha_bar, s.beta_bar, s.gamma_bar,
            )
            self._cache[key] = tuple(
                torch.as_tensor(a, device=device, dtype=dtype) for a in arrays
            )
        return self._cache[key]


def reverse_mixture_torch(
    probs: torch.Tensor,
    z_t: torch.Tensor,
    t: torch.Tensor,
    tensors: _ScheduleTensors,
    step: int = 1,
) -> torch.Tensor:
    """Differentiable twin of :func:`layoutgen.diffusion.reverse_mixture`.

    ``probs`` is (B, L, V) clean-token probabilities, ``z_t`` is (B, L) and
    ``t`` is (B,).  Gradients flow through ``probs`` only; the schedule
    constants are data.
    """
    arrays = tensors.get(probs.device, probs.dtype, step)
    kp1 = tensors.s.num_regular_plus_pad
    mask = kp1

    def col(arr):
        return arr[t][:, None, None]

    keep, replace, absorb = col(arrays[0]), col(arrays[1]), col(arrays[2])
    a_lo, b_lo, g_lo = col(arrays[3]), col(arrays[4]), col(arrays[5])
    a_t, b_t, g_t = col(arrays[6]), col(arrays[7]), col(arrays[8])

    oh = F.one_hot(z_t, kp1 + 1).to(probs.dtype)
    not_mask_col = 1.0 - F.one_hot(torch.tensor(mask, device=probs.device), kp1 + 1).to(
        probs.dtype
    )

    # z_t regular: mixture of posteriors, normalizers differ per clean token
    u = probs / (b_t + a_t * oh)
    base = b_lo * u.sum(-1, keepdim=True) + a_lo * u
    p_reg = (replace + keep * oh) * base * not_mask_col
    p_reg = p_reg / p_reg.sum(-1, keepdim=True).clamp_min(diffusion.PROB_FLOOR)

    # z_t MASK: normalizer is the same for every clean token
    p_mask = absorb * (b_lo + a_lo * probs) / g_t * not_mask_col
    p_mask = p_mask + (g_lo / g_t) * (1.0 - not_mask_col)

    from_mask = (z_t == mask)[..., None]
    return torch.where(from_mask, p_mask, p_reg)


def hybrid_loss(
    model: Denoiser,
    schedule: DiffusionSchedule,
    z0: np.ndarray,
    t: np.ndarray,
    rng: np.random.Generator,
    lambda_aux: float = 0.1,
    tensors: _ScheduleTensors | None = None,
) -> tuple[torch.Tensor, dict]:
    """Hybrid objective on one batch: posterior KL plus auxiliary cross-entropy.

    ``z0`` is a mask-free (B, L) batch and ``t`` a (B,) array in [1, T]; the
    corruption z_t is drawn here from ``rng``, so a fixed generator state
    makes the loss deterministic (as the finite-difference checks require).
    At t=1 the posterior is a point mass on z0, so the KL term reduces to the
    data negative log-likelihood without a special case.  Returns the scalar
    loss and a float breakdown.
    """
    if tensors is None:
        tensors = _ScheduleTensors(schedule)
    z0 = np.asarray(z0, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    z_t = diffusion.forward_sample(z0, t, schedule, rng)

    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    z0_t = torch.from_numpy(z0).to(device)
    zt_t = torch.from_numpy(z_t).to(device)
    t_t = torch.from_numpy(t).to(device)

    log_probs = model.log_probs(zt_t, t_t)
    nll_z0 = -log_probs.gather(-1, z0_t[..., None])[..., 0]  # (B, L)
    aux = nll_z0.mean(dim=1)

    q = diffusion.posterior_batch(schedule, z_t, z0, t)
    q_t = torch.as_tensor(q, device=device, dtype=dtype)
    p = reverse_mixture_torch(log_probs.exp(), zt_t, t_t, tensors)
    log_p = torch.log(p.clamp_min(diffusion.PROB_FLOOR))
    log_q = torch.log(q_t.clamp_min(diffusion.PROB_FLOOR))
    kl = torch.where(q_t > 0, q_t * (log_q - log_p), torch.zeros_like(q_t))
    vlb = kl.sum(-1).mean(dim=1)  # (B,)

    loss = (vlb + lambda_aux * aux).mean()
    parts = {
        "loss": float(loss.detach()),
        "vlb": float(vlb.mean().detach()),
        "aux": float(aux.mean().detach()),
    }
    return loss, parts


def uniform_baseline_loss(
    schedule: DiffusionSchedule,
    vocab: Vocabulary,
    n_max: int,
    z0: np.ndarray,
    t: np.ndarray,
    rng: np.random.Generator,
    lambda_aux: float = 0.1,
) -> float:
    """Hybrid loss of the uniform-over-legal-classes predictor (no model).

    Serves as the reference level that any trained denoiser must beat.  The
    auxiliary term of this predictor is exactly the mean log legal-set size.
    """
    z0 = np.asarray(z0, dtype=np.int64)
    t = np.asarray(t, dtype=np.int64)
    legal = vocab.legality_matrix(n_max)
    w = legal.astype(np.float64)
    w /= w.sum(-1, keepdims=True)
    z_t = diffusion.forward_sample(z0, t, schedule, rng)

    legal_counts = legal.sum(-1)  # per position: C+1 or B+1
    aux = float(np.mean(np.log(legal_counts)))
    vlb = np.zeros(len(z0))
    for i, ti in enumerate(t):
        q = diffusion.posterior_batch(schedule, z_t[i : i + 1], z0[i : i + 1], t[i : i + 1])[0]
        p = diffusion.reverse_mixture(schedule, w, z_t[i], int(ti))
        kl = np.where(q > 0, q * (np.log(np.maximum(q, 1e-30)) - np.log(np.maximum(p, 1e-30))), 0.0)
        vlb[i] = kl.sum(-1).mean()
    return float(vlb.mean() + lambda_aux * aux)


def train(
    model: Denoiser,
    corpus_tokens: np.ndarray,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> dict:
    """AdamW training loop over a tokenized corpus; returns the loss curve.

    Aborts with a diagnostic on NaN/Inf loss.  The curve holds one entry per
    step; ``ema`` is an exponential moving average with decay 0.99.
    """
    if len(corpus_tokens) == 0:
        raise ValueError("corpus is empty")
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.steps, eta_min=cfg.lr * cfg.lr_final_factor
    )
    tensors = _ScheduleTensors(schedule)
    curve = []
    ema = None
    model.train()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(corpus_tokens), size=cfg.batch_size)
        t = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        loss, parts = hybrid_loss(
            model, schedule, corpus_tokens[idx], t, rng, cfg.lambda_aux, tensors
        )
        if not np.isfinite(parts["loss"]):
            raise RuntimeError(f"training diverged at step {step}: loss={parts['loss']}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        scheduler.step()
        curve.append(parts["loss"])
        ema = parts["loss"] if ema is None else 0.99 * ema + 0.01 * parts["loss"]
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise RuntimeError("non-finite parameter after training")
    model.eval()
    return {"curve": curve, "ema": ema}


def token_accuracy(
    model: Denoiser, schedule: DiffusionSchedule, z0: np.ndarray, t: int, rng: np.random.Generator
) -> float:
    """Fraction of positions whose argmax clean-token prediction matches z0."""
    z_t = diffusion.forward_sample(z0, t, schedule, rng)
    probs = denoise(model, z_t, t)
    return float((probs.argmax(-1) == z0).mean())
