"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL line.

Desk-scale models (trained once per session, see conftest) back the
statistical criteria; the algebraic ones run against freshly drawn random
schedules.  Stated runtime budgets cover the work done inside the test body;
criterion 6's budget additionally covers both corrector trainings, which are
timed in their fixtures.
"""

import time

import numpy as np
import pytest
import torch

from layoutgen import corrector as C
from layoutgen import denoiser as D
from layoutgen import diffusion as dm
from layoutgen import experiments as E
from layoutgen import metrics as M
from layoutgen import sampler as S
from layoutgen.checkpoint import load_corrector, load_denoiser, save_model
from layoutgen.data import load_jsonl, save_jsonl
from layoutgen.schedule import build_schedule
from layoutgen.vocab import Element, Layout, Vocabulary, detokenize, tokenize

from conftest import BUILD_SECONDS, DESK
from gradcheck import max_fd_relative_error
from test_diffusion import brute_cumulative, brute_posterior, random_schedule
from test_metrics import brute_pair_iou, brute_precision_recall, sqrtm_oracle_frechet


def _report(index: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {index:02d} {name}: {status}  {detail}")


def test_criterion_01_transition_algebra_oracle():
    start = time.monotonic()
    rng = np.random.default_rng(2024)
    worst_marginal = worst_posterior = worst_mixture = 0.0
    for _ in range(20):
        s = random_schedule(rng)
        kp1 = s.num_regular_plus_pad
        for t in range(s.T + 1):
            qbar = brute_cumulative(s, t)
            for z0 in range(kp1):
                closed = dm.cumulative_marginal(s, t, z0)
                worst_marginal = max(worst_marginal, np.abs(qbar[:, z0] - closed).max())
        for _ in range(15):
            t = int(rng.integers(1, s.T + 1))
            z0 = int(rng.integers(0, kp1))
            z_t = int(rng.integers(0, kp1 + 1))
            ref = brute_posterior(s, z_t, z0, t)
            worst_posterior = max(
                worst_posterior, np.abs(dm.posterior(s, z_t, z0, t) - ref).max()
            )
        for step in (1, int(rng.integers(2, max(3, s.T // 2)))):
            if s.T < step:
                continue
            t = int(rng.integers(step, s.T + 1))
            z_t = int(rng.integers(0, kp1 + 1))
            w = rng.random(kp1 + 1)
            w[kp1] = 0.0
            w /= w.sum()
            ref = np.zeros(kp1 + 1)
            for k in range(kp1):
                ref += w[k] * brute_posterior(s, z_t, k, t, step=step)
            mine = dm.reverse_mixture(s, w[None, :], np.array([z_t]), t, step=step)[0]
            worst_mixture = max(worst_mixture, np.abs(mine - ref).max())
    elapsed = time.monotonic() - start
    ok = worst_marginal < 1e-10 and worst_posterior < 1e-10 and worst_mixture < 1e-10 and elapsed < 10
    _report(1, "transition-algebra oracle", ok,
            f"marginal {worst_marginal:.1e} posterior {worst_posterior:.1e} "
            f"mixture {worst_mixture:.1e} in {elapsed:.1f}s")
    assert worst_marginal < 1e-10
    assert worst_posterior < 1e-10
    assert worst_mixture < 1e-10
    assert elapsed < 10


def test_criterion_02_chapman_kolmogorov():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(6):
        s = random_schedule(rng)
        kp1 = s.num_regular_plus_pad
        for _ in range(40):
            t = int(rng.integers(1, s.T + 1))
            z0 = int(rng.integers(0, kp1))
            marginal_t = dm.cumulative_marginal(s, t, z0)
            acc = np.zeros(kp1 + 1)
            for z_t in range(kp1 + 1):
                if marginal_t[z_t] < 1e-30:
                    continue
                acc += dm.posterior(s, z_t, z0, t) * marginal_t[z_t]
            worst = max(worst, np.abs(acc - dm.cumulative_marginal(s, t - 1, z0)).max())
    _report(2, "Chapman-Kolmogorov", worst < 1e-9, f"max deviation {worst:.1e}")
    assert worst < 1e-9


def test_criterion_03_gradient_checks(tiny_schedule, tiny_corpus, tiny_denoiser):
    start = time.monotonic()
    torch.manual_seed(21)
    den = D.Denoiser(
        D.DenoiserConfig(num_categories=3, num_bins=16, n_max=4, T=12,
                         embed_dim=32, num_layers=2, num_heads=4, ff_dim=64)
    ).double()
    with torch.no_grad():
        for p in den.parameters():
            p.add_(0.01 * torch.randn_like(p))
    z0 = tiny_corpus[1][:6]
    t = np.array([1, 2, 4, 6, 9, 12])
    den_err = max_fd_relative_error(
        lambda: D.hybrid_loss(den, tiny_schedule, z0, t, np.random.default_rng(31), 0.1)[0],
        den, n_coords=20, seed=41,
    )

    cor = C.Corrector(
        C.CorrectorConfig(num_categories=3, num_bins=16, n_max=4, T=12,
                          embed_dim=32, num_layers=2, num_heads=4, ff_dim=64)
    ).double()
    with torch.no_grad():
        for p in cor.parameters():
            p.add_(0.01 * torch.randn_like(p))
    batch = C.make_train_batch(tiny_denoiser, tiny_corpus[1][:8], tiny_schedule,
                               np.random.default_rng(51))
    cor_err = max_fd_relative_error(
        lambda: C.corrector_loss(cor, batch)[0], cor, n_coords=20, seed=61
    )
    elapsed = time.monotonic() - start
    ok = den_err < 1e-4 and cor_err < 1e-4 and elapsed < 60
    _report(3, "gradient checks", ok,
            f"denoiser {den_err:.1e} corrector {cor_err:.1e} in {elapsed:.1f}s")
    assert den_err < 1e-4
    assert cor_err < 1e-4
    assert elapsed < 60


def test_criterion_04_token_sticking(
    desk_denoiser, desk_denoiser_linear_up, desk_schedule, desk_schedule_linear_up, desk_holdout
):
    start = time.monotonic()
    grid = list(range(5, DESK["T"] + 1, 5))
    z0 = desk_holdout[1][:96]
    flat = E.tsr_curve(desk_denoiser, desk_schedule, z0, grid, np.random.default_rng(12))
    up = E.tsr_curve(
        desk_denoiser_linear_up, desk_schedule_linear_up, z0, grid, np.random.default_rng(12)
    )
    flat_vals = np.array([r["tsr"] for r in flat])
    up_vals = np.array([r["tsr"] for r in up])
    frac_sticky = float((flat_vals >= 0.99).mean())
    elapsed = time.monotonic() - start
    ok = frac_sticky >= 0.8 and up_vals.mean() < flat_vals.mean() and elapsed < 300
    _report(4, "token sticking (flat vs linear-up)", ok,
            f"sticky-frac {frac_sticky:.2f} mean flat {flat_vals.mean():.4f} "
            f"up {up_vals.mean():.4f} in {elapsed:.0f}s")
    assert frac_sticky >= 0.8
    assert up_vals.mean() < flat_vals.mean()
    assert elapsed < 300


def test_criterion_05_mask_vs_token_replace(desk_denoiser, desk_schedule, desk_holdout):
    start = time.monotonic()
    n = 500
    mask = E.token_correction_success(
        desk_denoiser, desk_schedule, desk_holdout[1][:500], "mask-replace",
        np.random.default_rng(5), t_start=10, n_replace=3, trials=n,
    )
    token = E.token_correction_success(
        desk_denoiser, desk_schedule, desk_holdout[1][:500], "token-replace",
        np.random.default_rng(5), t_start=10, n_replace=3, trials=n,
    )
    p1, p2 = mask["success_rate"], token["success_rate"]
    sigma = np.sqrt(p1 * (1 - p1) / n + p2 * (1 - p2) / n)
    margin_sigmas = (p1 - p2) / max(sigma, 1e-12)
    elapsed = time.monotonic() - start
    ok = margin_sigmas > 3 and elapsed < 300
    _report(5, "mask- vs token-replace recovery", ok,
            f"mask {p1:.3f} token {p2:.3f} margin {margin_sigmas:.1f} sigma in {elapsed:.0f}s")
    assert margin_sigmas > 3
    assert elapsed < 300


def test_criterion_06_detection(
    desk_corrector, desk_corrector_mask_estimation, desk_holdout
):
    start = time.monotonic()
    kwargs = dict(rng=np.random.default_rng(6), n_replace=3, t_cond=10, trials=600)
    ours = E.detection_accuracy(desk_corrector, desk_holdout[1][:500], **kwargs)
    kwargs["rng"] = np.random.default_rng(6)
    ablation = E.detection_accuracy(desk_corrector_mask_estimation, desk_holdout[1][:500], **kwargs)
    train_time = BUILD_SECONDS["desk_corrector"] + BUILD_SECONDS["desk_corrector_mask_estimation"]
    elapsed = time.monotonic() - start + train_time
    ok = (
        ours["accuracy"] >= 2 * ours["chance"]
        and ours["accuracy"] > ablation["accuracy"]
        and elapsed < 600
    )
    _report(6, "erroneous-token detection", ok,
            f"ours {ours['accuracy']:.3f} ablation {ablation['accuracy']:.3f} "
            f"chance {ours['chance']:.3f} total {elapsed:.0f}s (incl. trainings)")
    assert ours["accuracy"] >= 2 * ours["chance"]
    assert ours["accuracy"] > ablation["accuracy"]
    assert elapsed < 600


def test_criterion_07_score_monotonicity(desk_corrector, desk_holdout):
    caps = [1, 2, 4, 8, 16]
    rows = E.score_vs_corruption(
        desk_corrector, desk_holdout[1][:500], caps, np.random.default_rng(17),
        n_replace=3, t_cond=10, trials=2500,
    )
    replaced = [r["replaced_mean"] for r in rows]
    clean = [r["clean_mean"] for r in rows]
    non_increasing = all(b <= a for a, b in zip(replaced, replaced[1:]))
    separated = all(c > r for c, r in zip(clean, replaced))
    ok = non_increasing and separated
    _report(7, "score vs corruption degree", ok,
            "replaced " + " ".join(f"{v:.3f}" for v in replaced)
            + " clean " + " ".join(f"{v:.3f}" for v in clean))
    assert non_increasing
    assert separated


def test_criterion_08_end_to_end_improvement(
    desk_denoiser, desk_corrector, desk_schedule, desk_vocab, desk_holdout
):
    start = time.monotonic()
    ref_features = M.features_of(desk_holdout[0][:1500], desk_vocab, DESK["n_max"])
    wins = []
    details = []
    for group in range(5):
        frechet = {}
        for label, cor in (("plain", None), ("corrected", desk_corrector)):
            cfg = S.SamplerConfig(
                steps=100, corrector_timesteps=(10, 20, 30), threshold=0.7, tau=0.05, seed=group
            )
            tokens, _ = S.generate_batch(
                desk_denoiser, desk_schedule, cfg, np.random.default_rng(group), 1000, corrector=cor
            )
            layouts = [S.decode_tokens(row, desk_vocab) for row in tokens]
            features = M.features_of(layouts, desk_vocab, DESK["n_max"])
            frechet[label] = M.frechet_distance(features, ref_features)
        wins.append(frechet["corrected"] < frechet["plain"])
        details.append(f"{frechet['plain']:.3f}->{frechet['corrected']:.3f}")
    elapsed = time.monotonic() - start
    ok = sum(wins) >= 4 and elapsed < 900
    _report(8, "corrector improves Frechet-geo", ok,
            f"wins {sum(wins)}/5 [{', '.join(details)}] in {elapsed:.0f}s")
    assert sum(wins) >= 4
    assert elapsed < 900


def test_criterion_09_fidelity_diversity_control(
    desk_denoiser, desk_corrector, desk_schedule, desk_holdout
):
    """Trend test over the nine schedules.

    Precision and recall are binomial estimates, so an "inversion" counts
    only when an adjacent pair violates the required direction by more than
    twice its pooled standard error; the Spearman rank correlations must
    also carry the right signs.  At most one significant inversion is
    allowed on each side.
    """
    import scipy.stats

    n_gen, n_ref = 1000, 1500
    schedules = [tuple(range(10, hi + 1, 10)) for hi in range(10, 100, 10)]
    rows = S.sweep_schedules(
        desk_denoiser, desk_corrector, desk_schedule, schedules,
        desk_holdout[0][:n_ref], n_gen, S.SamplerConfig(), rng_seed=23,
    )
    precision = [r["precision"] for r in rows]
    recall = [r["recall"] for r in rows]

    def significant_inversions(values, direction, n):
        count = 0
        for a, b in zip(values, values[1:]):
            se = np.sqrt(a * (1 - a) / n + b * (1 - b) / n)
            if direction == "up" and b < a - 2 * se:
                count += 1
            if direction == "down" and b > a + 2 * se:
                count += 1
        return count

    p_inv = significant_inversions(precision, "up", n_gen)
    r_inv = significant_inversions(recall, "down", n_ref)
    rho_p = scipy.stats.spearmanr(np.arange(9), precision).statistic
    rho_r = scipy.stats.spearmanr(np.arange(9), recall).statistic
    ok = p_inv <= 1 and r_inv <= 1 and rho_p > 0 and rho_r < 0
    _report(9, "fidelity-diversity trend over nine schedules", ok,
            "P " + " ".join(f"{v:.3f}" for v in precision)
            + " | R " + " ".join(f"{v:.3f}" for v in recall)
            + f" | sig. inversions P={p_inv} R={r_inv} | rho P={rho_p:.2f} R={rho_r:.2f}")
    assert p_inv <= 1
    assert r_inv <= 1
    assert rho_p > 0
    assert rho_r < 0


def test_criterion_10_speed_quality(
    desk_denoiser, desk_corrector, desk_schedule, desk_vocab, desk_holdout
):
    rows = E.speed_quality(
        desk_denoiser, desk_corrector, desk_schedule, [20, 100],
        desk_holdout[0][:1500], 800, S.SamplerConfig(), seed=29,
    )
    by_steps = {r["steps"]: r for r in rows}
    baseline = by_steps[100]["frechet_plain"]
    degradation_corrected = by_steps[20]["frechet_corrected"] - baseline
    degradation_plain = by_steps[20]["frechet_plain"] - baseline
    ok = degradation_corrected < degradation_plain
    _report(10, "fast-sampling quality retention", ok,
            f"T'=20 corrected {by_steps[20]['frechet_corrected']:.3f} "
            f"plain {by_steps[20]['frechet_plain']:.3f} baseline {baseline:.3f}")
    assert degradation_corrected < degradation_plain


@pytest.mark.parametrize("task", ["c", "c+s"])
def test_criterion_11_conditional_preservation(
    task, desk_denoiser, desk_corrector, desk_schedule, desk_vocab, desk_holdout
):
    layouts = desk_holdout[0]
    conditions = np.stack([
        S.condition_from_layout(layouts[i % len(layouts)], desk_vocab, DESK["n_max"], task)
        for i in range(1000)
    ])
    cfg = S.SamplerConfig(
        steps=100, corrector_timesteps=(10, 20, 30), threshold=0.7, tau=0.05,
        condition=conditions, seed=37,
    )
    tokens, traces = S.generate_batch(
        desk_denoiser, desk_schedule, cfg, np.random.default_rng(37), 1000,
        corrector=desk_corrector, collect_trace=True,
    )
    fixed = conditions != S.FREE
    preserved = bool(np.all(tokens[fixed] == conditions[fixed]))
    never_remasked = True
    for i, trace in enumerate(traces):
        fixed_i = set(np.flatnonzero(fixed[i]).tolist())
        for step in trace.steps:
            if fixed_i & set(step.masked_positions):
                never_remasked = False
            if step.scores is not None and not np.all(step.scores[list(fixed_i)] == 1.0):
                never_remasked = False
    ok = preserved and never_remasked
    _report(11, f"conditional preservation ({task})", ok,
            f"1000 generations, preserved={preserved} never-remasked={never_remasked}")
    assert preserved
    assert never_remasked


def test_criterion_12_operation_count(desk_denoiser, desk_corrector, desk_schedule, desk_vocab):
    cfg = S.SamplerConfig(steps=100, corrector_timesteps=(10, 20, 30), seed=41)
    _, trace = S.generate(desk_denoiser, desk_schedule, cfg, corrector=desk_corrector,
                          collect_trace=True)
    ok = (
        trace.denoiser_calls == 100
        and trace.corrector_calls == 3
        and trace.forward_operations == 103
    )
    _report(12, "operation-count bookkeeping", ok,
            f"{trace.denoiser_calls} denoiser + {trace.corrector_calls} corrector "
            f"= {trace.forward_operations}")
    assert trace.forward_operations == 103
    assert trace.denoiser_calls == 100
    assert trace.corrector_calls == 3


def test_criterion_13_metric_oracles(desk_vocab):
    rng = np.random.default_rng(43)

    def random_layout():
        n = int(rng.integers(1, 5))
        return Layout([
            Element(int(rng.integers(0, 3)), int(rng.integers(4, 28)), int(rng.integers(4, 28)),
                    int(rng.integers(2, 10)), int(rng.integers(2, 10)))
            for _ in range(n)
        ])

    gen = [random_layout() for _ in range(8)]
    ref = [random_layout() for _ in range(8)]
    iou_ok = all(
        abs(M.layout_pair_iou(g, r, desk_vocab) - brute_pair_iou(g, r, desk_vocab)) < 1e-12
        for g in gen for r in ref
    )

    x = rng.normal(size=(250, 6))
    self_zero = M.frechet_distance(x, x.copy())
    y = rng.normal(size=(260, 6)) @ rng.normal(size=(6, 6)) + 0.3
    frechet_err = abs(M.frechet_distance(x, y) - sqrtm_oracle_frechet(x, y))

    gen_pts = rng.normal(size=(40, 2))
    real_pts = rng.normal(size=(45, 2)) * 1.3 + 0.2
    pr_ok = M.precision_recall(gen_pts, real_pts, k=3) == brute_precision_recall(gen_pts, real_pts, 3)

    ok = iou_ok and self_zero < 1e-6 and frechet_err < 1e-8 and pr_ok
    _report(13, "metric oracles", ok,
            f"iou-exact={iou_ok} frechet(A,A)={self_zero:.1e} "
            f"frechet-vs-sqrtm {frechet_err:.1e} pr-exact={pr_ok}")
    assert iou_ok
    assert self_zero < 1e-6
    assert frechet_err < 1e-8
    assert pr_ok


def test_criterion_14_determinism_and_round_trips(
    desk_denoiser, desk_corrector, desk_schedule, desk_vocab, desk_holdout, tmp_path
):
    cfg = S.SamplerConfig(steps=100, corrector_timesteps=(10, 20, 30), seed=53)
    rng_a, rng_b = np.random.default_rng(53), np.random.default_rng(53)
    tokens_a, _ = S.generate_batch(desk_denoiser, desk_schedule, cfg, rng_a, 8,
                                   corrector=desk_corrector)
    tokens_b, _ = S.generate_batch(desk_denoiser, desk_schedule, cfg, rng_b, 8,
                                   corrector=desk_corrector)
    sampling_identical = bool(np.array_equal(tokens_a, tokens_b))

    layouts = desk_holdout[0][:200]
    token_round_trip = all(
        detokenize(tokenize(l, desk_vocab, DESK["n_max"]), desk_vocab).elements == l.elements
        for l in layouts
    )

    path = tmp_path / "round.jsonl"
    save_jsonl(layouts, path)
    jsonl_round_trip = all(
        a.elements == b.elements for a, b in zip(layouts, load_jsonl(path))
    )

    ck_den, ck_cor = tmp_path / "den.pt", tmp_path / "cor.pt"
    save_model(ck_den, "denoiser", desk_denoiser)
    save_model(ck_cor, "corrector", desk_corrector)
    den2, cor2 = load_denoiser(ck_den), load_corrector(ck_cor)
    ck_identical = all(
        torch.equal(v, den2.state_dict()[k]) for k, v in desk_denoiser.state_dict().items()
    ) and all(
        torch.equal(v, cor2.state_dict()[k]) for k, v in desk_corrector.state_dict().items()
    )
    probe = desk_holdout[1][:4]
    ck_behaviour = np.array_equal(
        D.denoise(desk_denoiser, probe, 10), D.denoise(den2, probe, 10)
    ) and np.array_equal(C.score(desk_corrector, probe, 10), C.score(cor2, probe, 10))

    ok = sampling_identical and token_round_trip and jsonl_round_trip and ck_identical and ck_behaviour
    _report(14, "determinism and round-trips", ok,
            f"sampling={sampling_identical} tokens={token_round_trip} "
            f"jsonl={jsonl_round_trip} checkpoint={ck_identical and ck_behaviour}")
    assert sampling_identical
    assert token_round_trip
    assert jsonl_round_trip
    assert ck_identical
    assert ck_behaviour
