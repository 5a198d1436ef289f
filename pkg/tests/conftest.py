"""Shared fixtures.

Two scales are used: a tiny setup (few bins, T=12, small models) keeps unit
tests fast, and session-scoped desk-scale fixtures (trained on a 10k-layout
corpus at T=100) back the acceptance suite.  Heavy fixtures record their
build time in ``BUILD_SECONDS`` so acceptance criteria with training budgets
can assert against it.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
import torch

from layoutgen import corrector as corrector_mod
from layoutgen import denoiser as denoiser_mod
from layoutgen.data import SynthConfig, synth_generate
from layoutgen.schedule import build_schedule
from layoutgen.vocab import Vocabulary, tokenize

BUILD_SECONDS: dict[str, float] = {}

torch.set_num_threads(2)


def tokens_of(layouts, vocab, n_max):
    return np.stack([tokenize(l, vocab, n_max).tokens for l in layouts])


# ---------------------------------------------------------------------------
# tiny scale

TINY = dict(num_categories=3, num_bins=16, n_max=4, T=12)


@pytest.fixture(scope="session")
def tiny_vocab():
    return Vocabulary(TINY["num_categories"], TINY["num_bins"])


@pytest.fixture(scope="session")
def tiny_schedule():
    return build_schedule(T=TINY["T"], K=TINY["num_categories"] + TINY["num_bins"])


@pytest.fixture(scope="session")
def tiny_corpus(tiny_vocab):
    layouts = synth_generate(
        SynthConfig(grammar="ui", count=600, seed=5, num_bins=16, num_categories=3, n_hi=4)
    )
    return layouts, tokens_of(layouts, tiny_vocab, TINY["n_max"])


@pytest.fixture(scope="session")
def tiny_denoiser_cfg():
    return denoiser_mod.DenoiserConfig(
        **TINY, embed_dim=32, num_layers=2, num_heads=4, ff_dim=64
    )


@pytest.fixture(scope="session")
def tiny_denoiser(tiny_denoiser_cfg, tiny_corpus, tiny_schedule):
    torch.manual_seed(0)
    model = denoiser_mod.Denoiser(tiny_denoiser_cfg)
    denoiser_mod.train(
        model,
        tiny_corpus[1],
        tiny_schedule,
        denoiser_mod.TrainConfig(steps=700, batch_size=32),
        np.random.default_rng(0),
    )
    return model


@pytest.fixture(scope="session")
def tiny_corrector(tiny_denoiser, tiny_corpus, tiny_schedule):
    torch.manual_seed(1)
    model = corrector_mod.Corrector(
        corrector_mod.CorrectorConfig(**TINY, embed_dim=32, num_layers=2, num_heads=4, ff_dim=64)
    )
    corrector_mod.train_corrector(
        model,
        tiny_denoiser,
        tiny_corpus[1],
        tiny_schedule,
        denoiser_mod.TrainConfig(steps=400, batch_size=32),
        np.random.default_rng(1),
    )
    return model


# ---------------------------------------------------------------------------
# desk scale (acceptance)

DESK = dict(num_categories=5, num_bins=32, n_max=8, T=100)
DESK_TRAIN_STEPS = 3500
DESK_CORRECTOR_STEPS = 2000


@pytest.fixture(scope="session")
def desk_vocab():
    return Vocabulary(DESK["num_categories"], DESK["num_bins"])


@pytest.fixture(scope="session")
def desk_schedule():
    return build_schedule(T=DESK["T"], K=DESK["num_categories"] + DESK["num_bins"])


@pytest.fixture(scope="session")
def desk_schedule_linear_up():
    return build_schedule(
        T=DESK["T"],
        K=DESK["num_categories"] + DESK["num_bins"],
        beta_profile="linear-up",
        profile_param=0.1,
    )


@pytest.fixture(scope="session")
def desk_corpus(desk_vocab):
    layouts = synth_generate(SynthConfig(grammar="doc", count=10000, seed=11, shift_range=1))
    return layouts, tokens_of(layouts, desk_vocab, DESK["n_max"])


@pytest.fixture(scope="session")
def desk_holdout(desk_vocab):
    layouts = synth_generate(SynthConfig(grammar="doc", count=2000, seed=999, shift_range=1))
    return layouts, tokens_of(layouts, desk_vocab, DESK["n_max"])


def _train_desk_denoiser(corpus_tokens, schedule):
    torch.manual_seed(0)
    model = denoiser_mod.Denoiser(denoiser_mod.DenoiserConfig(**DESK))
    denoiser_mod.train(
        model,
        corpus_tokens,
        schedule,
        denoiser_mod.TrainConfig(steps=DESK_TRAIN_STEPS),
        np.random.default_rng(0),
    )
    return model


@pytest.fixture(scope="session")
def desk_denoiser(desk_corpus, desk_schedule):
    start = time.monotonic()
    model = _train_desk_denoiser(desk_corpus[1], desk_schedule)
    BUILD_SECONDS["desk_denoiser"] = time.monotonic() - start
    return model


@pytest.fixture(scope="session")
def desk_denoiser_linear_up(desk_corpus, desk_schedule_linear_up):
    start = time.monotonic()
    model = _train_desk_denoiser(desk_corpus[1], desk_schedule_linear_up)
    BUILD_SECONDS["desk_denoiser_linear_up"] = time.monotonic() - start
    return model


def _train_desk_corrector(objective, den, corpus_tokens, schedule):
    torch.manual_seed(1)
    model = corrector_mod.Corrector(corrector_mod.CorrectorConfig(**DESK, objective=objective))
    corrector_mod.train_corrector(
        model,
        den,
        corpus_tokens,
        schedule,
        denoiser_mod.TrainConfig(steps=DESK_CORRECTOR_STEPS),
        np.random.default_rng(2),
    )
    return model


@pytest.fixture(scope="session")
def desk_corrector(desk_denoiser, desk_corpus, desk_schedule):
    start = time.monotonic()
    model = _train_desk_corrector("correctness", desk_denoiser, desk_corpus[1], desk_schedule)
    BUILD_SECONDS["desk_corrector"] = time.monotonic() - start
    return model


@pytest.fixture(scope="session")
def desk_corrector_mask_estimation(desk_denoiser, desk_corpus, desk_schedule):
    start = time.monotonic()
    model = _train_desk_corrector(
        "mask-estimation", desk_denoiser, desk_corpus[1], desk_schedule
    )
    BUILD_SECONDS["desk_corrector_mask_estimation"] = time.monotonic() - start
    return model
