"""Command-line surface: corpus synthesis, training, sampling, evaluation,
diagnostic experiments and SVG rendering.

Every command takes ``--config`` (TOML/JSON, all fields defaulted),
``--seed``, ``--out`` and ``--threads``; outputs land in the chosen
directory together with a ``manifest.json`` carrying the package version,
config hash and seed.  CSV artifacts start with a versioned header comment
so their schema travels with them.  Commands exit nonzero on any error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config

_EXPERIMENTS = ("tsr", "recover", "detect", "score-vs-corruption", "schedule-sweep", "speed-quality")


def _out_dir(args, command: str, cfg: RunConfig) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        root = os.environ.get("LAYOUTGEN_OUT", ".")
        path = Path(root) / f"{command}-{cfg.config_hash}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(path: Path, command: str, cfg: RunConfig, seed: int, extra: dict | None = None) -> None:
    payload = {
        "version": __version__,
        "command": command,
        "config_hash": cfg.config_hash,
        "seed": seed,
        **(extra or {}),
    }
    (path / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, schema: str, cfg: RunConfig, seed: int, columns: list[str], rows: list[dict]) -> None:
    lines = [
        f"# layoutgen={__version__} schema={schema}-v1 config={cfg.config_hash} seed={seed}",
        ",".join(columns),
    ]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _vocab(cfg: RunConfig):
    from .vocab import Vocabulary

    return Vocabulary(cfg.vocab.num_categories, cfg.vocab.num_bins)


def _schedule(cfg: RunConfig):
    from .schedule import build_schedule

    vocab = _vocab(cfg)
    return build_schedule(
        T=cfg.schedule.T,
        K=vocab.num_regular,
        beta_profile=cfg.schedule.profile,
        profile_param=cfg.schedule.profile_param,
        epsilon=cfg.schedule.epsilon,
        gamma_headroom=cfg.schedule.gamma_headroom,
    )


def _load_tokens(path: str, cfg: RunConfig) -> np.ndarray:
    from .data import load_jsonl
    from .vocab import tokenize

    vocab = _vocab(cfg)
    layouts = load_jsonl(
        path,
        max_elements=cfg.vocab.n_max,
        num_categories=vocab.num_categories,
        num_bins=vocab.num_bins,
    )
    return np.stack([tokenize(l, vocab, cfg.vocab.n_max).tokens for l in layouts])


def _check_vocab_compat(model_cfg, cfg: RunConfig, path: str) -> None:
    expected = (cfg.vocab.num_categories, cfg.vocab.num_bins, cfg.vocab.n_max, cfg.schedule.T)
    got = (model_cfg.num_categories, model_cfg.num_bins, model_cfg.n_max, model_cfg.T)
    if expected != got:
        raise ConfigError(
            f"checkpoint {path} was built for (C, B, n_max, T)={got}, config wants {expected}"
        )


def _load_ddm(path: str, cfg: RunConfig):
    from .checkpoint import load_denoiser

    model = load_denoiser(path)
    _check_vocab_compat(model.cfg, cfg, path)
    return model


def _load_cor(path: str | None, cfg: RunConfig):
    if path is None:
        return None
    from .checkpoint import load_corrector

    model = load_corrector(path)
    _check_vocab_compat(model.cfg, cfg, path)
    return model


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args, cfg: RunConfig) -> None:
    from .data import SynthConfig, dataset_manifest, save_jsonl, synth_generate

    seed = cfg.data.seed if args.seed is None else args.seed
    scfg = SynthConfig(
        grammar=cfg.data.grammar,
        n_lo=cfg.data.n_lo,
        n_hi=cfg.data.n_hi,
        num_bins=cfg.vocab.num_bins,
        num_categories=cfg.vocab.num_categories,
        jitter=cfg.data.jitter,
        shift_range=cfg.data.shift_range,
        seed=seed,
        count=cfg.data.count,
    )
    layouts = synth_generate(scfg)
    out = _out_dir(args, "synth", cfg)
    save_jsonl(layouts, out / "data.jsonl")
    _write_manifest(out, "synth", cfg, seed, dataset_manifest(layouts, scfg, cfg.config_hash))
    print(f"wrote {len(layouts)} layouts to {out / 'data.jsonl'}")


def cmd_train_ddm(args, cfg: RunConfig) -> None:
    import torch

    from .checkpoint import save_model
    from .denoiser import Denoiser, DenoiserConfig, TrainConfig, train

    seed = 0 if args.seed is None else args.seed
    torch.manual_seed(seed)
    tokens = _load_tokens(args.data, cfg)
    d = cfg.denoiser
    model = Denoiser(
        DenoiserConfig(
            num_categories=cfg.vocab.num_categories,
            num_bins=cfg.vocab.num_bins,
            n_max=cfg.vocab.n_max,
            T=cfg.schedule.T,
            embed_dim=d.embed_dim,
            num_layers=d.num_layers,
            num_heads=d.num_heads,
            ff_dim=d.ff_dim,
            dropout=d.dropout,
        )
    )
    tcfg = TrainConfig(
        lr=d.lr, betas=(d.beta1, d.beta2), weight_decay=d.weight_decay,
        batch_size=d.batch_size, steps=d.steps, lambda_aux=d.lambda_aux,
    )
    history = train(model, tokens, _schedule(cfg), tcfg, np.random.default_rng(seed))
    out = _out_dir(args, "train-ddm", cfg)
    save_model(out / "denoiser.pt", "denoiser", model)
    _write_manifest(out, "train-ddm", cfg, seed, {"final_ema_loss": history["ema"], "steps": d.steps})
    (out / "loss_curve.csv").write_text(
        f"# layoutgen={__version__} schema=loss-v1 config={cfg.config_hash} seed={seed}\n"
        + "step,loss\n"
        + "\n".join(f"{i},{v}" for i, v in enumerate(history["curve"]))
        + "\n",
        encoding="utf-8",
    )
    print(f"denoiser checkpoint at {out / 'denoiser.pt'} (ema loss {history['ema']:.4f})")


def cmd_train_corrector(args, cfg: RunConfig) -> None:
    import torch

    from .checkpoint import save_model
    from .corrector import Corrector, CorrectorConfig, train_corrector
    from .denoiser import TrainConfig

    seed = 0 if args.seed is None else args.seed
    torch.manual_seed(seed + 1)
    tokens = _load_tokens(args.data, cfg)
    den = _load_ddm(args.ddm, cfg)
    c = cfg.corrector
    model = Corrector(
        CorrectorConfig(
            num_categories=cfg.vocab.num_categories,
            num_bins=cfg.vocab.num_bins,
            n_max=cfg.vocab.n_max,
            T=cfg.schedule.T,
            embed_dim=c.embed_dim,
            num_layers=c.num_layers,
            num_heads=c.num_heads,
            ff_dim=c.ff_dim,
            dropout=c.dropout,
            objective=c.objective,
        )
    )
    tcfg = TrainConfig(
        lr=c.lr, betas=(c.beta1, c.beta2), weight_decay=c.weight_decay,
        batch_size=c.batch_size, steps=c.steps,
    )
    history = train_corrector(model, den, tokens, _schedule(cfg), tcfg, np.random.default_rng(seed))
    out = _out_dir(args, "train-corrector", cfg)
    save_model(out / "corrector.pt", "corrector", model)
    _write_manifest(
        out, "train-corrector", cfg, seed,
        {"final_ema_loss": history["ema"], "steps": c.steps, "objective": c.objective},
    )
    print(f"corrector checkpoint at {out / 'corrector.pt'} (ema loss {history['ema']:.4f})")


def cmd_sample(args, cfg: RunConfig) -> None:
    from .data import load_jsonl, save_jsonl
    from .sampler import (
        MaskgitConfig, SamplerConfig, condition_from_layout, decode_tokens,
        generate_batch, maskgit_decode_batch,
    )

    seed = cfg.sampler.seed if args.seed is None else args.seed
    den = _load_ddm(args.ddm, cfg)
    cor = _load_cor(args.corrector, cfg)
    vocab = _vocab(cfg)
    schedule = _schedule(cfg)
    s = cfg.sampler
    scfg = SamplerConfig(
        steps=s.steps,
        corrector_timesteps=s.corrector_timesteps,
        threshold=s.threshold,
        tau=s.tau,
        selection_mode=s.selection_mode,
        noise_space=s.noise_space,
        seed=seed,
    )
    out = _out_dir(args, "sample", cfg)
    rng = np.random.default_rng(seed)

    condition = None
    if args.condition_data:
        source = load_jsonl(args.condition_data, max_elements=cfg.vocab.n_max)
        condition = np.stack([
            condition_from_layout(source[i % len(source)], vocab, cfg.vocab.n_max, args.condition_task)
            for i in range(args.n)
        ])

    if args.decoder == "maskgit":
        mcfg = MaskgitConfig(
            steps=s.maskgit_steps, threshold=s.maskgit_threshold, tau=s.tau,
            condition=condition, seed=seed,
        )
        tokens, tr = maskgit_decode_batch(
            den, schedule, mcfg, rng, args.n, corrector=cor, collect_trace=args.trace
        )
    else:
        scfg = dataclasses.replace(scfg, condition=condition)
        tokens, tr = generate_batch(
            den, schedule, scfg, rng, args.n, corrector=cor, collect_trace=args.trace
        )
    layouts = [decode_tokens(row, vocab) for row in tokens]
    traces = tr or []

    save_jsonl(layouts, out / "samples.jsonl")
    if args.trace:
        with open(out / "traces.jsonl", "w", encoding="utf-8") as fh:
            for tr_one in traces:
                for record in tr_one.to_records():
                    fh.write(json.dumps(record, separators=(",", ":")) + "\n")
    _write_manifest(out, "sample", cfg, seed, {
        "n": args.n,
        "conditional": bool(args.condition_data),
        "forward_operations": traces[0].forward_operations if traces else None,
    })
    print(f"wrote {len(layouts)} samples to {out / 'samples.jsonl'}")


def cmd_eval(args, cfg: RunConfig) -> None:
    from .data import load_jsonl
    from .metrics import evaluate, features_of

    seed = 0 if args.seed is None else args.seed
    vocab = _vocab(cfg)
    gen = load_jsonl(args.gen, max_elements=cfg.vocab.n_max)
    ref = load_jsonl(args.ref, max_elements=cfg.vocab.n_max)
    report = evaluate(
        gen, ref, vocab,
        n_max=cfg.vocab.n_max, k=cfg.eval.k, max_iou_cap=cfg.eval.max_iou_cap,
        config_hash=cfg.config_hash,
    )
    out = _out_dir(args, "eval", cfg)
    payload = report.as_dict()
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    columns = sorted(payload)
    _write_csv(out / "report.csv", "metric-report", cfg, seed, columns, [payload])
    if args.export_features:
        for name, layouts in (("gen", gen), ("ref", ref)):
            feats = features_of(layouts, vocab, cfg.vocab.n_max)
            cols = [f"f{i}" for i in range(feats.shape[1])]
            rows = [dict(zip(cols, map(float, row))) for row in feats]
            _write_csv(out / f"features_{name}.csv", "features-geo", cfg, seed, cols, rows)
    _write_manifest(out, "eval", cfg, seed)
    print(json.dumps(payload, indent=2, sort_keys=True))


def cmd_experiment(args, cfg: RunConfig) -> None:
    from . import experiments as E
    from .data import load_jsonl
    from .sampler import SamplerConfig, sweep_schedules

    seed = cfg.sampler.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    den = _load_ddm(args.ddm, cfg)
    cor = _load_cor(args.corrector, cfg)
    schedule = _schedule(cfg)
    tokens = _load_tokens(args.data, cfg) if args.data else None
    vocab = _vocab(cfg)
    out = _out_dir(args, f"experiment-{args.which}", cfg)
    s = cfg.sampler
    base_cfg = SamplerConfig(
        steps=s.steps, corrector_timesteps=s.corrector_timesteps,
        threshold=s.threshold, tau=s.tau, selection_mode=s.selection_mode,
        noise_space=s.noise_space, seed=seed,
    )

    if args.which == "tsr":
        grid = [int(v) for v in args.t_grid.split(",")] if args.t_grid else list(
            range(0, schedule.T + 1, max(1, schedule.T // 20))
        )
        rows = E.tsr_curve(den, schedule, tokens[: args.n], grid, rng)
        _write_csv(out / "tsr.csv", "tsr", cfg, seed, ["t", "tsr", "survivors"], rows)
    elif args.which == "recover":
        rows = [
            E.token_correction_success(den, schedule, tokens, mode, rng, trials=args.trials)
            for mode in ("mask-replace", "token-replace")
        ]
        _write_csv(out / "recover.csv", "recover", cfg, seed,
                   ["mode", "success_rate", "successes", "trials"], rows)
    elif args.which == "detect":
        if cor is None:
            raise ConfigError("experiment detect needs --corrector")
        row = E.detection_accuracy(cor, tokens, rng, trials=args.trials)
        _write_csv(out / "detect.csv", "detect", cfg, seed,
                   ["accuracy", "chance", "trials", "t"], [row])
    elif args.which == "score-vs-corruption":
        if cor is None:
            raise ConfigError("experiment score-vs-corruption needs --corrector")
        caps = [int(v) for v in args.caps.split(",")]
        rows = E.score_vs_corruption(cor, tokens, caps, rng, trials=args.trials)
        _write_csv(out / "score_vs_corruption.csv", "score-vs-corruption", cfg, seed,
                   ["cap", "replaced_mean", "clean_mean", "trials", "t"], rows)
    elif args.which == "schedule-sweep":
        if cor is None:
            raise ConfigError("experiment schedule-sweep needs --corrector")
        reference = load_jsonl(args.data, max_elements=cfg.vocab.n_max)
        # nine densities 1..9 at multiples of T/10 (the {10,...,10k} family at T=100)
        base = max(1, cfg.schedule.T // 10)
        schedules = [tuple(range(base, base * i + 1, base)) for i in range(1, 10)]
        rows = sweep_schedules(
            den, cor, schedule, schedules, reference, cfg.eval.n_samples, base_cfg, rng_seed=seed
        )
        _write_csv(out / "schedule_sweep.csv", "schedule-sweep", cfg, seed,
                   ["schedule", "density", "frechet", "precision", "recall"], rows)
    elif args.which == "speed-quality":
        reference = load_jsonl(args.data, max_elements=cfg.vocab.n_max)
        steps_list = [int(v) for v in args.steps.split(",")]
        rows = E.speed_quality(
            den, cor, schedule, steps_list, reference, cfg.eval.n_samples, base_cfg, seed=seed
        )
        columns = ["steps", "frechet_plain"] + (["frechet_corrected"] if cor else [])
        _write_csv(out / "speed_quality.csv", "speed-quality", cfg, seed, columns, rows)
    _write_manifest(out, f"experiment-{args.which}", cfg, seed)
    print(f"experiment {args.which} written to {out}")


def cmd_render(args, cfg: RunConfig) -> None:
    from .data import load_jsonl
    from .render import render_to_dir

    vocab = _vocab(cfg)
    layouts = load_jsonl(args.input, max_elements=cfg.vocab.n_max)
    out = Path(args.svg)
    paths = render_to_dir(layouts, vocab, out)
    _write_manifest(out, "render", cfg, 0, {"rendered": len(paths)})
    print(f"rendered {len(paths)} SVGs to {out}")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layoutgen", description=__doc__)
    parser.add_argument("--version", action="version", version=f"layoutgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML/JSON run config")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)

    p = sub.add_parser("train-ddm", help="train the denoiser")
    common(p)
    p.add_argument("--data", required=True, help="training JSONL")

    p = sub.add_parser("train-corrector", help="train the corrector against a frozen denoiser")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ddm", required=True, help="denoiser checkpoint")

    p = sub.add_parser("sample", help="generate layouts")
    common(p)
    p.add_argument("--ddm", required=True)
    p.add_argument("--corrector", default=None)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--decoder", choices=["ddm", "maskgit"], default="ddm")
    p.add_argument("--trace", action="store_true", help="dump per-step traces")
    p.add_argument("--condition-task", choices=["c", "c+s"], default="c")
    p.add_argument("--condition-data", default=None, help="JSONL supplying conditions")

    p = sub.add_parser("eval", help="score generated layouts against a reference set")
    common(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--export-features", action="store_true",
                   help="also write the geo feature vectors as CSV")

    p = sub.add_parser("experiment", help="run a diagnostic experiment")
    common(p)
    p.add_argument("which", choices=_EXPERIMENTS)
    p.add_argument("--ddm", required=True)
    p.add_argument("--corrector", default=None)
    p.add_argument("--data", default=None, help="JSONL of clean layouts")
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--caps", default="1,2,4,8,16")
    p.add_argument("--steps", default="20,30,50,75,100")
    p.add_argument("--t-grid", default=None)

    p = sub.add_parser("render", help="render layouts to SVG files")
    common(p)
    p.add_argument("input", help="JSONL of layouts")
    p.add_argument("--svg", required=True, help="output directory")

    return parser


_HANDLERS = {
    "synth": cmd_synth,
    "train-ddm": cmd_train_ddm,
    "train-corrector": cmd_train_corrector,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "render": cmd_render,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    try:
        cfg = load_config(args.config)
        _HANDLERS[args.command](args, cfg)
    except Exception as exc:  # CLI boundary: report and exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
