"""Learned token-correctness scorer for generated layouts.

The corrector sees a mask-free token sequence and a timestep and emits one
score in [0, 1] per token: the probability that the token matches the
(unknown) clean layout.  An MLP fuses the five token embeddings of each
element into one element embedding; a transformer encoder without any
positional encoding captures element interactions (elements are a set); a
linear head maps each element embedding back to five per-token scores.

It trains as a binary classifier against a frozen denoiser: corrupt a clean
layout to z_t, draw a mask-free sample from the denoiser's reverse
distribution, and label each token by whether it still equals the clean one.
The ``mask-estimation`` ablation labels tokens by whether they survived from
z_t instead (high score = was not masked), which mirrors critics that
predict mask positions rather than correctness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import diffusion
from .denoiser import Denoiser, TrainConfig, denoise
from .schedule import DiffusionSchedule
from .vocab import TOKENS_PER_ELEMENT, Vocabulary

EULER_MASCHERONI = 0.5772156649015329

OBJECTIVES = ("correctness", "mask-estimation")
SELECTION_MODES = ("threshold", "lowest-k")


@dataclass(frozen=True)
class CorrectorConfig:
    num_categories: int = 5
    num_bins: int = 32
    n_max: int = 8
    T: int = 100
    embed_dim: int = 96
    num_layers: int = 4
    num_heads: int = 8
    ff_dim: int = 192
    dropout: float = 0.0
    objective: str = "correctness"

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.num_categories, self.num_bins)

    @property
    def seq_len(self) -> int:
        return TOKENS_PER_ELEMENT * self.n_max


class Corrector(nn.Module):
    def __init__(self, cfg: CorrectorConfig):
        super().__init__()
        self.cfg = cfg
        vocab = cfg.vocab
        d = cfg.embed_dim
        self.token_emb = nn.Embedding(vocab.size, d)
        self.time_emb = nn.Embedding(cfg.T + 1, d)
        self.fuse = nn.Sequential(
            nn.Linear(TOKENS_PER_ELEMENT * d, d), nn.GELU(), nn.Linear(d, d)
        )
        layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=cfg.num_heads,
            dim_feedforward=cfg.ff_dim,
            dropout=cfg.dropout,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=cfg.num_layers, enable_nested_tensor=False
        )
        self.head = nn.Linear(d, TOKENS_PER_ELEMENT)
        # zero-init head: an untrained corrector scores everything 0.5
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, tokens: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Per-token correctness logits of shape (B, 5 * n_max)."""
        b = tokens.shape[0]
        emb = self.token_emb(tokens).reshape(b, self.cfg.n_max, -1)
        x = self.fuse(emb) + self.time_emb(t)[:, None, :]
        return self.head(self.encoder(x)).reshape(b, -1)


def score(model: Corrector, tokens: np.ndarray, t) -> np.ndarray:
    """Correctness scores in [0, 1] for mask-free sequences.

    Accepts one (L,) sequence or a (B, L) batch; rejects MASK tokens.
    """
    single = np.asarray(tokens).ndim == 1
    arr = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    mask_id = model.cfg.vocab.mask_id
    if np.any(arr == mask_id):
        raise ValueError("corrector input must be MASK-free")
    t_arr = np.full(len(arr), t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t, dtype=np.int64)
    model.eval()
    with torch.no_grad():
        logits = model(torch.from_numpy(arr), torch.from_numpy(t_arr))
        out = torch.sigmoid(logits).double().cpu().numpy()
    return out[0] if single else out


@dataclass
class CorrectorTrainBatch:
    z0: np.ndarray          # (B, L) clean tokens
    t: np.ndarray           # (B,) timesteps
    z_t: np.ndarray         # (B, L) corrupted tokens
    z_hat: np.ndarray       # (B, L) mask-free denoiser sample for z_{t-1}
    targets: np.ndarray     # (B, L) float targets per the training objective


def make_train_batch(
    den: Denoiser,
    z0: np.ndarray,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    t: np.ndarray | None = None,
    objective: str = "correctness",
) -> CorrectorTrainBatch:
    """Assemble one training batch against a frozen denoiser.

    The mask-free sample is drawn from the reverse distribution with the
    MASK class zeroed and field legality enforced, exactly matching what the
    sampler feeds the corrector at generation time.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    z0 = np.asarray(z0, dtype=np.int64)
    vocab = den.cfg.vocab
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=len(z0))
    t = np.asarray(t, dtype=np.int64)

    z_t = diffusion.forward_sample(z0, t, schedule, rng)
    legal = vocab.legality_matrix(den.cfg.n_max)
    probs = denoise(den, z_t, t)
    rev = diffusion.reverse_mixture(schedule, probs, z_t, t)
    rev = diffusion.renormalize_non_mask(rev, vocab.mask_id)
    rev = diffusion.apply_legality(rev, legal, vocab.mask_id, allow_mask=False)
    z_hat = diffusion.sample_categorical(rev, rng)

    if objective == "correctness":
        targets = (z_hat == z0).astype(np.float64)
    else:  # mask-estimation: high score = token survived from z_t unmasked
        targets = (z_t != vocab.mask_id).astype(np.float64)
    return CorrectorTrainBatch(z0=z0, t=t, z_t=z_t, z_hat=z_hat, targets=targets)


def binary_cross_entropy(scores: np.ndarray, targets: np.ndarray, eps: float = 1e-12) -> float:
    """Mean BCE of probability scores against binary targets, clamped at eps."""
    s = np.clip(np.asarray(scores, dtype=np.float64), eps, 1.0 - eps)
    m = np.asarray(targets, dtype=np.float64)
    return float(-np.mean(m * np.log(s) + (1.0 - m) * np.log(1.0 - s)))


def corrector_loss(model: Corrector, batch: CorrectorTrainBatch) -> tuple[torch.Tensor, float]:
    """Mean binary cross-entropy over all 5N positions."""
    logits = model(
        torch.from_numpy(batch.z_hat),
        torch.from_numpy(batch.t),
    )
    dtype = next(model.parameters()).dtype
    targets = torch.as_tensor(batch.targets, dtype=dtype)
    loss = F.binary_cross_entropy_with_logits(logits, targets)
    return loss, float(loss.detach())


def train_corrector(
    model: Corrector,
    den: Denoiser,
    corpus_tokens: np.ndarray,
    schedule: DiffusionSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> dict:
    """Train against a frozen denoiser; aborts on divergence."""
    if len(corpus_tokens) == 0:
        raise ValueError("corpus is empty")
    den.eval()
    for p in den.parameters():
        p.requires_grad_(False)
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=cfg.steps, eta_min=cfg.lr * cfg.lr_final_factor
    )
    curve = []
    ema = None
    model.train()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(corpus_tokens), size=cfg.batch_size)
        batch = make_train_batch(
            den, corpus_tokens[idx], schedule, rng, objective=model.cfg.objective
        )
        loss, value = corrector_loss(model, batch)
        if not np.isfinite(value):
            raise RuntimeError(f"corrector training diverged at step {step}: loss={value}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        scheduler.step()
        curve.append(value)
        ema = value if ema is None else 0.99 * ema + 0.01 * value
    for p in model.parameters():
        if not torch.isfinite(p).all():
            raise RuntimeError("non-finite corrector parameter after training")
    model.eval()
    return {"curve": curve, "ema": ema}


def centered_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel noise shifted to zero mean."""
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12))) - EULER_MASCHERONI


def select_tokens_to_mask(
    scores: np.ndarray,
    threshold: float,
    tau: float,
    rng: np.random.Generator,
    protected: np.ndarray | None = None,
    mode: str = "threshold",
    lowest_k: int | None = None,
    noise_space: str = "probability",
) -> np.ndarray:
    """Positions whose perturbed score marks them for re-masking.

    In ``threshold`` mode a position is selected when its score, perturbed by
    ``tau``-scaled centered Gumbel noise, falls below ``threshold``; with
    ``tau=0`` this is plain deterministic thresholding.  In ``lowest-k`` mode
    the ``lowest_k`` lowest perturbed scores are selected.  Protected
    positions are never selected.  ``noise_space`` chooses whether the noise
    perturbs raw probabilities (default) or their logits.
    """
    if mode not in SELECTION_MODES:
        raise ValueError(f"mode must be one of {SELECTION_MODES}")
    scores = np.asarray(scores, dtype=np.float64)
    if tau > 0:
        g = tau * centered_gumbel(rng, scores.shape)
        if noise_space == "probability":
            perturbed = scores + g
        elif noise_space == "logit":
            clipped = np.clip(scores, 1e-9, 1.0 - 1e-9)
            perturbed = 1.0 / (1.0 + np.exp(-(np.log(clipped / (1.0 - clipped)) + g)))
        else:
            raise ValueError("noise_space must be 'probability' or 'logit'")
    else:
        perturbed = scores.copy()
    if protected is not None and len(protected):
        perturbed[np.asarray(protected, dtype=np.int64)] = np.inf

    if mode == "threshold":
        return np.flatnonzero(perturbed < threshold)
    if lowest_k is None:
        raise ValueError("lowest-k mode needs lowest_k")
    k = int(min(max(lowest_k, 0), np.isfinite(perturbed).sum()))
    if k == 0:
        return np.array([], dtype=np.int64)
    return np.sort(np.argsort(perturbed, kind="stable")[:k]).astype(np.int64)
