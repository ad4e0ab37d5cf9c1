"""Desk-scale reference experiments (scaled-down long-time and missing-step runs)."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datagen import Corpus, GenConfig, generate_corpus
from .dynamics import BioreactorConfig
from .nn import GroupInit, InitSpec, MlpParams
from .training import (TrainConfig, TrainHistory, evaluate, evaluate_per_sample,
                       mu_surface_error, train_two_stage, visited_region)

DESK_SEED = 20240
DESK_SAMPLES = 128
DESK_STEPS = 512
DESK_HIDDEN = 16


def desk_corpus(seed=DESK_SEED) -> Corpus:
    cfg = BioreactorConfig(n_steps=DESK_STEPS)
    gen = GenConfig(n_train=DESK_SAMPLES, n_validation=DESK_SAMPLES, n_test=DESK_SAMPLES)
    return generate_corpus(seed, cfg, gen)


def desk_init(seed=DESK_SEED) -> InitSpec:
    # small output weights keep the initial rate near zero, away from blowup
    return InitSpec(w2=GroupInit("normal", 0.01), seed=seed)


def desk_train_config(mask_mode="s_only_dense", seed=DESK_SEED, **kw) -> TrainConfig:
    return TrainConfig(mask_mode=mask_mode, seed=seed, **kw)


@dataclass
class DeskResult:
    params: MlpParams
    history: TrainHistory
    test_ratio: float
    mu_rmse: float
    stage_ratios: dict = field(default_factory=dict)
    seconds: float = 0.0


def run_desk(mask_mode="s_only_dense", seed=DESK_SEED, corpus=None, init=None,
             callback=None, **train_kw) -> DeskResult:
    corpus = desk_corpus(seed) if corpus is None else corpus
    t0 = time.perf_counter()
    params, history = train_two_stage(corpus, desk_train_config(mask_mode, seed, **train_kw),
                                      desk_init(seed) if init is None else init,
                                      hidden=DESK_HIDDEN, callback=callback)
    test = evaluate(params, corpus.test, corpus.cfg)
    rmse = mu_surface_error(params, corpus.cfg, visited_region(corpus.test))
    stage_ratios = {s: history.final(s).train.loss_ratio for s in history.terminations}
    return DeskResult(params, history, test.loss_ratio, rmse, stage_ratios,
                      time.perf_counter() - t0)


def loss_ranked_samples(params, split, cfg):
    """Indices of the lowest-, median- and highest-loss samples."""
    ratios = evaluate_per_sample(params, split, cfg)
    order = np.argsort(ratios, kind="stable")
    return {"lowest": int(order[0]), "median": int(order[(len(order) - 1) // 2]),
            "highest": int(order[-1])}, ratios
