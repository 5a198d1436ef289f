"""Generation loops: plain reverse sampling, corrector-guided correction,
conditional generation, confidence decoding and schedule sweeps.

The reverse walk visits a decreasing grid of timesteps from T to 0 (uniform
stride when the step count divides T, rounded otherwise).  At each visited
step the denoiser predicts clean-token distributions once; the strided
posterior mixture is sampled to advance.  When the next timestep is in the
corrector schedule, the same mixture, renormalized over non-MASK classes,
provides the mask-free candidate: the corrector scores it, low-scored
positions return to MASK, and generation continues from that state.  So each
corrector application costs exactly one extra forward pass (the corrector's
own), and a run with schedule {10, 20, 30} at 100 steps performs 103 forward
operations in total.

Conditioned positions are re-imposed after every step, carry score 1 during
correction, and are never re-masked.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffusion
from .corrector import Corrector, score, select_tokens_to_mask
from .denoiser import Denoiser, denoise
from .schedule import DiffusionSchedule
from .vocab import TOKENS_PER_ELEMENT, Element, Layout, Vocabulary

FREE = -1  # condition sentinel for unconstrained positions


class SamplerError(ValueError):
    pass


@dataclass
class SamplerConfig:
    steps: int = 100                     # effective reverse steps T'
    corrector_timesteps: tuple[int, ...] = (10, 20, 30)
    threshold: float = 0.7
    tau: float = 0.05
    selection_mode: str = "threshold"
    noise_space: str = "probability"
    condition: np.ndarray | None = None  # (L,) or (n, L) token ids, FREE where unconstrained
    seed: int = 0

    def validate(self, schedule: DiffusionSchedule, vocab: Vocabulary, seq_len: int) -> None:
        if not 1 <= self.steps <= schedule.T:
            raise SamplerError(f"steps must be in [1, {schedule.T}]")
        for t in self.corrector_timesteps:
            if not 1 <= t <= schedule.T:
                raise SamplerError(f"corrector timestep {t} outside [1, {schedule.T}]")
        if self.condition is not None:
            cond = np.atleast_2d(np.asarray(self.condition))
            if cond.shape[-1] != seq_len:
                raise SamplerError(f"condition rows must have length {seq_len}")
            legal = vocab.legality_matrix(seq_len // TOKENS_PER_ELEMENT)
            for row in cond:
                for p in np.flatnonzero(row != FREE):
                    tok = int(row[p])
                    if tok == vocab.mask_id or not legal[p, tok]:
                        raise SamplerError(f"condition token {tok} illegal at position {p}")


@dataclass
class TraceStep:
    t: int
    tokens: np.ndarray
    masked_positions: list[int]
    scores: np.ndarray | None


@dataclass
class GenerationTrace:
    steps: list[TraceStep] = field(default_factory=list)
    denoiser_calls: int = 0
    corrector_calls: int = 0

    @property
    def forward_operations(self) -> int:
        return self.denoiser_calls + self.corrector_calls

    def to_records(self) -> list[dict]:
        return [
            {
                "t": s.t,
                "tokens": s.tokens.tolist(),
                "masked_positions": list(map(int, s.masked_positions)),
                "scores": None if s.scores is None else [round(float(v), 6) for v in s.scores],
            }
            for s in self.steps
        ]


def timestep_grid(T: int, steps: int) -> list[int]:
    """Strictly decreasing visit grid from T to 0 with ``steps`` transitions."""
    if not 1 <= steps <= T:
        raise SamplerError(f"steps must be in [1, {T}]")
    grid = np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))
    return [int(v) for v in grid[::-1]]


def map_to_grid(ts: tuple[int, ...], grid: list[int]) -> set[int]:
    """Nearest visited timestep (> 0) for each scheduled corrector time."""
    candidates = [g for g in grid if g > 0]
    mapped = set()
    for t in ts:
        mapped.add(min(candidates, key=lambda g: (abs(g - t), g)))
    return mapped


def _impose(state: np.ndarray, condition: np.ndarray | None) -> None:
    if condition is not None:
        fixed = condition != FREE
        if condition.ndim == 1:
            state[:, fixed] = condition[fixed]
        else:
            state[fixed] = condition[fixed]


def _broadcast_condition(condition, n: int, seq_len: int) -> np.ndarray | None:
    if condition is None:
        return None
    cond = np.asarray(condition, dtype=np.int64)
    if cond.ndim == 2 and cond.shape[0] != n:
        raise SamplerError(f"per-row condition needs {n} rows, got {cond.shape[0]}")
    return cond


def generate_batch(
    den: Denoiser,
    schedule: DiffusionSchedule,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    n: int,
    corrector: Corrector | None = None,
    collect_trace: bool = False,
) -> tuple[np.ndarray, list[GenerationTrace] | None]:
    """Run ``n`` reverse chains in lockstep; returns (n, L) mask-free tokens.

    ``cfg.condition`` may be one shared (L,) template or per-chain (n, L).
    """
    vocab = den.cfg.vocab
    seq_len = den.cfg.seq_len
    cfg.validate(schedule, vocab, seq_len)
    mask_id = vocab.mask_id
    legal = vocab.legality_matrix(den.cfg.n_max)
    condition = _broadcast_condition(cfg.condition, n, seq_len)

    def protected_rows() -> list[np.ndarray]:
        if condition is None:
            return [np.array([], dtype=np.int64)] * n
        if condition.ndim == 1:
            fixed = np.flatnonzero(condition != FREE)
            return [fixed] * n
        return [np.flatnonzero(condition[i] != FREE) for i in range(n)]

    protected = protected_rows()
    grid = timestep_grid(schedule.T, cfg.steps)
    corr_steps = map_to_grid(cfg.corrector_timesteps, grid) if corrector is not None else set()

    state = np.full((n, seq_len), mask_id, dtype=np.int64)
    _impose(state, condition)
    traces = [GenerationTrace() for _ in range(n)] if collect_trace else None

    for t, t_next in zip(grid[:-1], grid[1:]):
        probs = denoise(den, state, t)
        rev = diffusion.reverse_mixture(schedule, probs, state, t, step=t - t_next)
        rev = diffusion.apply_legality(rev, legal, mask_id, allow_mask=True)
        if traces is not None:
            for tr in traces:
                tr.denoiser_calls += 1

        if t_next in corr_steps:
            mask_free = diffusion.renormalize_non_mask(rev, mask_id)
            cand = diffusion.sample_categorical(mask_free, rng)
            _impose(cand, condition)
            scores = score(corrector, cand, t)
            for i in range(n):
                scores[i, protected[i]] = 1.0
            state = cand
            lowest_k = int(np.floor(seq_len * schedule.gamma_bar[t_next]))
            for i in range(n):
                sel = select_tokens_to_mask(
                    scores[i],
                    cfg.threshold,
                    cfg.tau,
                    rng,
                    protected=protected[i],
                    mode=cfg.selection_mode,
                    lowest_k=lowest_k,
                    noise_space=cfg.noise_space,
                )
                state[i, sel] = mask_id
                if traces is not None:
                    traces[i].corrector_calls += 1
                    traces[i].steps.append(
                        TraceStep(t_next, state[i].copy(), list(map(int, sel)), scores[i].copy())
                    )
        else:
            state = diffusion.sample_categorical(rev, rng)
            _impose(state, condition)
            if traces is not None:
                for i in range(n):
                    masked = list(map(int, np.flatnonzero(state[i] == mask_id)))
                    traces[i].steps.append(TraceStep(t_next, state[i].copy(), masked, None))

    state = _resolve_residual_masks(den, schedule, state, condition, legal, rng)
    return state, traces


def _resolve_residual_masks(den, schedule, state, condition, legal, rng) -> np.ndarray:
    """One extra mask-free resampling pass for any MASK surviving at t=0."""
    vocab = den.cfg.vocab
    mask_id = vocab.mask_id
    residual = state == mask_id
    if not residual.any():
        return state
    probs = denoise(den, state, 1)
    probs = diffusion.apply_legality(probs, legal, mask_id, allow_mask=False)
    fill = diffusion.sample_categorical(probs, rng)
    state = np.where(residual, fill, state)
    _impose(state, condition)
    if (state == mask_id).any():
        raise SamplerError("MASK tokens survived the final resampling pass")
    return state


def decode_tokens(tokens: np.ndarray, vocab: Vocabulary) -> Layout:
    """Lenient decoder for generated sequences.

    Slots whose category token is PAD are dropped; so are rare inconsistent
    slots mixing a real category with PAD geometry.  Use
    :func:`layoutgen.vocab.detokenize` when strict round-tripping is needed.
    """
    groups = np.asarray(tokens).reshape(-1, TOKENS_PER_ELEMENT)
    elements = []
    for group in groups:
        c = int(group[0])
        if not 0 <= c < vocab.num_categories:
            continue
        geo = group[1:] - vocab.num_categories
        if np.any(geo < 0) or np.any(geo >= vocab.num_bins):
            continue
        elements.append(Element(c, int(geo[0]), int(geo[1]), int(geo[2]), int(geo[3])))
    return Layout(elements)


def generate(
    den: Denoiser,
    schedule: DiffusionSchedule,
    cfg: SamplerConfig,
    corrector: Corrector | None = None,
    collect_trace: bool = False,
) -> tuple[Layout, GenerationTrace | None]:
    """Generate one layout; deterministic given ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    tokens, traces = generate_batch(
        den, schedule, cfg, rng, n=1, corrector=corrector, collect_trace=collect_trace
    )
    return decode_tokens(tokens[0], den.cfg.vocab), traces[0] if traces else None


def reverse_from(
    den: Denoiser,
    schedule: DiffusionSchedule,
    state: np.ndarray,
    t_start: int,
    rng: np.random.Generator,
    delta: int = 1,
) -> np.ndarray:
    """Plain (corrector-free) reverse walk from an arbitrary state at t_start.

    Used by the diagnostic experiments that inject corrupted states mid-way;
    returns mask-free (B, L) tokens at t=0.
    """
    if not 1 <= t_start <= schedule.T:
        raise SamplerError(f"t_start must be in [1, {schedule.T}]")
    vocab = den.cfg.vocab
    mask_id = vocab.mask_id
    legal = vocab.legality_matrix(den.cfg.n_max)
    state = np.array(state, dtype=np.int64, copy=True)
    grid = list(range(t_start, 0, -delta)) + [0]
    for t, t_next in zip(grid[:-1], grid[1:]):
        probs = denoise(den, state, t)
        rev = diffusion.reverse_mixture(schedule, probs, state, t, step=t - t_next)
        rev = diffusion.apply_legality(rev, legal, mask_id, allow_mask=True)
        state = diffusion.sample_categorical(rev, rng)
    return _resolve_residual_masks(den, schedule, state, None, legal, rng)


# ---------------------------------------------------------------------------
# conditional generation

CONDITION_TASKS = {
    "c": ("c",),               # category -> size + position
    "c+s": ("c", "w", "h"),    # category + size -> position
}


def condition_from_layout(
    layout: Layout, vocab: Vocabulary, n_max: int, task: str
) -> np.ndarray:
    """Fixed-token template for a conditional task.

    Fixes the requested fields of every element and pins unused element
    slots fully to PAD, so the element count is part of the condition.
    """
    if task not in CONDITION_TASKS:
        raise SamplerError(f"unknown condition task {task!r}, expected one of {list(CONDITION_TASKS)}")
    from .vocab import tokenize

    fields = CONDITION_TASKS[task]
    full = tokenize(layout, vocab, n_max).tokens
    cond = np.full(TOKENS_PER_ELEMENT * n_max, FREE, dtype=np.int64)
    field_index = {"c": 0, "x": 1, "y": 2, "w": 3, "h": 4}
    for i in range(n_max):
        base = TOKENS_PER_ELEMENT * i
        if i >= len(layout.elements):
            cond[base : base + TOKENS_PER_ELEMENT] = vocab.pad_id
            continue
        for f in fields:
            cond[base + field_index[f]] = full[base + field_index[f]]
    return cond


def generate_conditional(
    den: Denoiser,
    schedule: DiffusionSchedule,
    condition: np.ndarray,
    cfg: SamplerConfig,
    corrector: Corrector | None = None,
    collect_trace: bool = False,
) -> tuple[Layout, GenerationTrace | None]:
    """Generate with fixed tokens; the output agrees with them exactly."""
    import dataclasses

    cond_cfg = dataclasses.replace(cfg, condition=np.asarray(condition, dtype=np.int64))
    return generate(den, schedule, cond_cfg, corrector=corrector, collect_trace=collect_trace)


# ---------------------------------------------------------------------------
# confidence decoding

@dataclass
class MaskgitConfig:
    steps: int = 10
    threshold: float = 0.3        # corrector threshold when one is supplied
    tau: float = 0.05
    choice_temperature: float = 1.0
    condition: np.ndarray | None = None
    seed: int = 0


def maskgit_decode_batch(
    den: Denoiser,
    schedule: DiffusionSchedule,
    cfg: MaskgitConfig,
    rng: np.random.Generator,
    n: int,
    corrector: Corrector | None = None,
    collect_trace: bool = False,
) -> tuple[np.ndarray, list[GenerationTrace] | None]:
    """Parallel confidence decoding with a cosine mask-count schedule.

    Each step fills every masked position from the denoiser's clean-token
    prediction, then re-masks either the lowest-confidence fills (plain
    mode; committed tokens are never revised) or, when a corrector is
    supplied, every position scoring below the threshold.
    """
    vocab = den.cfg.vocab
    seq_len = den.cfg.seq_len
    mask_id = vocab.mask_id
    legal = vocab.legality_matrix(den.cfg.n_max)
    condition = _broadcast_condition(cfg.condition, n, seq_len)
    if condition is None:
        protected = [np.array([], dtype=np.int64)] * n
    elif condition.ndim == 1:
        protected = [np.flatnonzero(condition != FREE)] * n
    else:
        protected = [np.flatnonzero(condition[i] != FREE) for i in range(n)]

    state = np.full((n, seq_len), mask_id, dtype=np.int64)
    _impose(state, condition)
    traces = [GenerationTrace() for _ in range(n)] if collect_trace else None

    for s in range(cfg.steps, 0, -1):
        t_model = max(1, round(s * schedule.T / cfg.steps))
        probs = denoise(den, state, t_model)
        probs = diffusion.apply_legality(probs, legal, mask_id, allow_mask=False)
        fill = diffusion.sample_categorical(probs, rng)
        cand = np.where(state == mask_id, fill, state)
        _impose(cand, condition)
        if traces is not None:
            for tr in traces:
                tr.denoiser_calls += 1

        if s == 1:
            state = cand
            if traces is not None:
                for i in range(n):
                    traces[i].steps.append(TraceStep(0, state[i].copy(), [], None))
            continue

        if corrector is not None:
            scores = score(corrector, cand, t_model)
            for i in range(n):
                scores[i, protected[i]] = 1.0
            state = cand
            for i in range(n):
                sel = select_tokens_to_mask(
                    scores[i], cfg.threshold, cfg.tau, rng, protected=protected[i]
                )
                state[i, sel] = mask_id
                if traces is not None:
                    traces[i].corrector_calls += 1
                    traces[i].steps.append(
                        TraceStep(s - 1, state[i].copy(), list(map(int, sel)), scores[i].copy())
                    )
        else:
            ratio = np.cos(np.pi / 2 * (cfg.steps - (s - 1)) / cfg.steps)
            n_mask = int(np.floor(seq_len * ratio))
            chosen_p = np.take_along_axis(probs, cand[..., None], axis=-1)[..., 0]
            anneal = cfg.choice_temperature * (s - 1) / cfg.steps
            conf = np.log(np.maximum(chosen_p, 1e-30))
            if anneal > 0:
                from .corrector import centered_gumbel

                conf = conf + anneal * centered_gumbel(rng, conf.shape)
            committed = state != mask_id
            conf[committed] = np.inf
            state = cand.copy()
            for i in range(n):
                if n_mask <= 0:
                    sel = np.array([], dtype=np.int64)
                else:
                    order = np.argsort(conf[i], kind="stable")
                    sel = order[:n_mask]
                    sel = sel[~np.isinf(conf[i][sel])]
                state[i, sel] = mask_id
                if traces is not None:
                    traces[i].steps.append(
                        TraceStep(s - 1, state[i].copy(), list(map(int, sel)), None)
                    )

    state = _resolve_residual_masks(den, schedule, state, condition, legal, rng)
    return state, traces


def maskgit_decode(
    den: Denoiser,
    schedule: DiffusionSchedule,
    cfg: MaskgitConfig,
    corrector: Corrector | None = None,
    collect_trace: bool = False,
) -> tuple[Layout, GenerationTrace | None]:
    rng = np.random.default_rng(cfg.seed)
    tokens, traces = maskgit_decode_batch(
        den, schedule, cfg, rng, n=1, corrector=corrector, collect_trace=collect_trace
    )
    return decode_tokens(tokens[0], den.cfg.vocab), traces[0] if traces else None


# ---------------------------------------------------------------------------
# schedule sweep

def sweep_schedules(
    den: Denoiser,
    corrector: Corrector | None,
    schedule: DiffusionSchedule,
    schedules: list[tuple[int, ...]],
    reference: list,
    n_samples: int,
    base_cfg: SamplerConfig,
    rng_seed: int = 0,
) -> list[dict]:
    """Generate under each corrector schedule and score against a reference.

    Returns one row per schedule with the Fréchet-geo distance, precision and
    recall; an empty schedule row is the corrector-free baseline.
    """
    import dataclasses

    from . import metrics

    vocab = den.cfg.vocab
    ref_features = metrics.features_of(reference, vocab, den.cfg.n_max)
    rows = []
    for ts in schedules:
        cfg = dataclasses.replace(base_cfg, corrector_timesteps=tuple(ts))
        rng = np.random.default_rng(rng_seed)
        tokens, _ = generate_batch(
            den, schedule, cfg, rng, n=n_samples,
            corrector=corrector if ts else None,
        )
        layouts = [decode_tokens(row, vocab) for row in tokens]
        gen_features = metrics.features_of(layouts, vocab, den.cfg.n_max)
        precision, recall = metrics.precision_recall(gen_features, ref_features)
        rows.append(
            {
                "schedule": "+".join(map(str, ts)) if ts else "none",
                "density": len(ts),
                "frechet": metrics.frechet_distance(gen_features, ref_features),
                "precision": precision,
                "recall": recall,
            }
        )
    return rows
