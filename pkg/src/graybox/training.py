"""Adam training with early stopping and the coarse-then-fine schedule."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adjoint import (ADEQUATE_LOSS, MASK_MODES, LossReport, batch_loss, bptt_gradient,
                      make_mask, per_sample_losses)
from .datagen import Corpus, Split, coarsen_corpus
from .dynamics import BioreactorConfig, fmt, haldane_mu
from .errors import BlowupError, ConfigError, ContractError
from .nn import MlpGrads, MlpParams, InitSpec, mlp_forward, mlp_init

CONTINUE = "continue"
IMPROVEMENT_FAILURE = "improvement_failure"
GENERALIZATION_FAILURE = "generalization_failure"
ADEQUATE_PERFORMANCE = "adequate_performance"
EPOCH_LIMIT = "epoch_limit"
BLOWUP_ABORT = "blowup_abort"
TERMINATIONS = (IMPROVEMENT_FAILURE, GENERALIZATION_FAILURE, ADEQUATE_PERFORMANCE,
                EPOCH_LIMIT, BLOWUP_ABORT)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, p: MlpParams, **kw):
        return cls(np.zeros(p.size), np.zeros(p.size), 0, **kw)


def adam_step(a: AdamState, p: MlpParams, g: MlpGrads, lr: float):
    """One bias-corrected Adam update; returns ``(AdamState, MlpParams)``."""
    if not lr >= 0:
        raise ConfigError("learning rate must be non-negative")
    gv = g.to_vector()
    if gv.shape != a.m.shape:
        raise ContractError("gradient does not match optimizer state")
    t = a.t + 1
    m = a.beta1 * a.m + (1.0 - a.beta1) * gv
    v = a.beta2 * a.v + (1.0 - a.beta2) * (gv * gv)
    m_hat = m / (1.0 - a.beta1 ** t)
    v_hat = v / (1.0 - a.beta2 ** t)
    new = p.to_vector() - lr * m_hat / (np.sqrt(v_hat) + a.epsilon)
    if not np.all(np.isfinite(new)):
        raise BlowupError("non-finite parameters after Adam update")
    return replace(a, m=m, v=v, t=t), p.replace_vector(new)


@dataclass
class StopMonitor:
    """Early-stopping bookkeeping; losses are per-sample-per-step values."""
    patience: int = 12
    generalization_limit: float = 2.0
    adequate: float = ADEQUATE_LOSS
    best_train_loss: float = math.inf
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0

    def __post_init__(self):
        if self.patience < 1 or not self.generalization_limit > 0 or not self.adequate > 0:
            raise ConfigError("stopping thresholds must be positive")


def check_stopping(mon: StopMonitor, train: LossReport, val: LossReport) -> str:
    """Update ``mon`` with one epoch's reports and return the decision.

    Precedence: adequate performance, generalization failure, improvement
    failure.
    """
    tr = train.per_sample_per_step
    va = val.per_sample_per_step
    if tr < mon.best_train_loss:
        mon.best_train_loss = tr
        mon.epochs_since_improvement = 0
    else:
        mon.epochs_since_improvement += 1
    mon.best_val_loss = min(mon.best_val_loss, va)

    if va < mon.adequate:
        return ADEQUATE_PERFORMANCE
    if tr > 0 and mon.best_val_loss / tr > mon.generalization_limit:
        return GENERALIZATION_FAILURE
    if mon.epochs_since_improvement >= mon.patience:
        return IMPROVEMENT_FAILURE
    return CONTINUE


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs_max: int = 2000
    seed: int = 0
    stage1_coarsen_factor: int = 8
    mask_mode: str = "s_only_dense"
    clip_norm: float | None = 1e3
    two_stage: bool = True
    patience: int = 12
    generalization_limit: float = 2.0
    adequate: float = ADEQUATE_LOSS
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs_max < 1:
            raise ConfigError("epochs_max must be >= 1")
        if self.stage1_coarsen_factor < 1:
            raise ConfigError("stage1_coarsen_factor must be >= 1")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive or None")


@dataclass(frozen=True)
class EpochRecord:
    stage: int
    epoch: int
    train: LossReport
    val: LossReport
    wall_seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    terminations: dict = field(default_factory=dict)  # stage -> reason

    def stage_records(self, stage):
        return [r for r in self.records if r.stage == stage]

    def final(self, stage) -> EpochRecord:
        return self.stage_records(stage)[-1]

    def write_csv(self, path, wall_time=False):
        """Per-epoch CSV. Wall time is opt-in so the default file is reproducible."""
        cols = ["stage", "epoch", "train_loss", "train_ratio", "val_loss", "val_ratio"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols + (["wall_seconds"] if wall_time else []))
            for r in self.records:
                row = [r.stage, r.epoch, fmt(r.train.per_sample_per_step), fmt(r.train.loss_ratio),
                       fmt(r.val.per_sample_per_step), fmt(r.val.loss_ratio)]
                if wall_time:
                    row.append("%.3f" % r.wall_seconds)
                w.writerow(row)

    def termination_lines(self):
        out = []
        for stage, reason in sorted(self.terminations.items()):
            recs = self.stage_records(stage)
            last = recs[-1] if recs else None
            line = f"stage={stage} reason={reason} epochs={len(recs)}"
            if last is not None:
                line += (f" train_ratio={fmt(last.train.loss_ratio)}"
                         f" val_ratio={fmt(last.val.loss_ratio)}")
            out.append(line)
        return out


class TrainingAborted(BlowupError):
    """Numeric blowup during training; carries the partial history and last good params."""

    def __init__(self, message, history, params, sample=None, step=None):
        super().__init__(message, sample=sample, step=step)
        self.history = history
        self.params = params


def clip_gradient(g: MlpGrads, clip_norm):
    if clip_norm is None:
        return g
    norm = g.norm()
    if norm <= clip_norm:
        return g
    return MlpGrads.from_vector(g.hidden, g.to_vector() * (clip_norm / norm))


def epoch_order(n, seed, stage, epoch):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stage, epoch)))
    return rng.permutation(n)


def run_epoch(p: MlpParams, adam: AdamState, split: Split, cfg: TrainConfig, mask,
              dyn: BioreactorConfig, stage=1, epoch=0):
    """One shuffled pass of mini-batch Adam over ``split``.

    The returned report aggregates each batch's loss at the parameters used
    for that batch's gradient (i.e. before its update).
    """
    n = len(split)
    if n == 0:
        raise ContractError("empty training split")
    if cfg.batch_size > n:
        raise ContractError(f"batch_size {cfg.batch_size} exceeds split size {n}")
    order = epoch_order(n, cfg.seed, stage, epoch)
    total = 0.0
    for start in range(0, n, cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        try:
            g, rep = bptt_gradient(p, split.take(idx), mask, dyn)
        except BlowupError as exc:
            sample = None if exc.sample is None else int(idx[exc.sample])
            raise BlowupError(f"batch at offset {start}: {exc} (split sample {sample})",
                              sample=sample, step=exc.step) from exc
        total += rep.total
        adam, p = adam_step(adam, p, clip_gradient(g, cfg.clip_norm), cfg.learning_rate)
    return p, adam, LossReport.from_total(total, n, mask.n_observed_steps)


def train_stage(p, corpus: Corpus, cfg: TrainConfig, stage, history: TrainHistory,
                callback=None):
    """Train until a stopping condition fires; appends to ``history``."""
    dyn = corpus.cfg
    mask = make_mask(cfg.mask_mode, dyn.n_steps)
    adam = AdamState.fresh(p, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    mon = StopMonitor(cfg.patience, cfg.generalization_limit, cfg.adequate)
    best_val = math.inf
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs_max):
        try:
            p_next, adam, train_rep = run_epoch(p, adam, corpus.train, cfg, mask, dyn,
                                                stage, epoch)
            # validation uses the training loss function so the two are comparable
            val_rep = batch_loss(p_next, corpus.validation, mask, dyn)
        except BlowupError as exc:
            history.terminations[stage] = BLOWUP_ABORT
            raise TrainingAborted(f"stage {stage}, epoch {epoch}: {exc}", history, p,
                                  sample=exc.sample, step=exc.step) from exc
        p = p_next
        improved_val = val_rep.per_sample_per_step < best_val
        best_val = min(best_val, val_rep.per_sample_per_step)
        rec = EpochRecord(stage, epoch, train_rep, val_rep, time.perf_counter() - t0)
        history.records.append(rec)
        decision = check_stopping(mon, train_rep, val_rep)
        if callback is not None:
            callback(stage, epoch, p, rec, improved_val)
        if decision != CONTINUE:
            history.terminations[stage] = decision
            return p
    history.terminations[stage] = EPOCH_LIMIT
    return p


def train_two_stage(corpus: Corpus, cfg: TrainConfig, init: InitSpec | MlpParams,
                    hidden: int = 16, callback=None):
    """Coarse pretraining followed by full-resolution training.

    ``init`` is either an :class:`InitSpec` (drawn at width ``hidden``) or
    ready parameters. Each stage starts with a fresh Adam state. With
    ``cfg.two_stage`` off only the full-resolution stage (stage 2) runs.
    Returns ``(params, history)``; raises :class:`TrainingAborted` on blowup.
    """
    p = init if isinstance(init, MlpParams) else mlp_init(hidden, init)
    history = TrainHistory()
    if cfg.two_stage:
        if corpus.cfg.n_steps % cfg.stage1_coarsen_factor:
            raise ContractError(
                f"coarsen factor {cfg.stage1_coarsen_factor} does not divide "
                f"n_steps={corpus.cfg.n_steps}")
        coarse = coarsen_corpus(corpus, cfg.stage1_coarsen_factor)
        p = train_stage(p, coarse, cfg, 1, history, callback)
    p = train_stage(p, corpus, cfg, 2, history, callback)
    return p, history


def evaluate(p: MlpParams, split: Split, cfg: BioreactorConfig, mask_mode=None) -> LossReport:
    """Test-style loss over both channels at every step.

    ``mask_mode`` is accepted for call-site symmetry and deliberately ignored.
    """
    return batch_loss(p, split, make_mask("xs_dense", cfg.n_steps), cfg)


def evaluate_per_sample(p: MlpParams, split: Split, cfg: BioreactorConfig) -> np.ndarray:
    """Per-sample loss ratios under the evaluation (xs_dense) loss."""
    mask = make_mask("xs_dense", cfg.n_steps)
    return per_sample_losses(p, split, mask, cfg) / mask.n_observed_steps / ADEQUATE_LOSS


@dataclass(frozen=True, eq=False)
class Region:
    """Grid points ``(X, S)`` at which the learned rate is compared to the truth."""
    X: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64).ravel()
        S = np.asarray(self.S, dtype=np.float64).ravel()
        if X.shape != S.shape:
            raise ContractError("region coordinates differ in length")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "S", S)

    def __len__(self):
        return self.X.size


def grid_axes(split: Split, resolution=64):
    """Regular grid axes spanning the bounding box of the split's ground truth."""
    X = split.truth[:, :, 0]
    S = split.truth[:, :, 1]
    return (np.linspace(X.min(), X.max(), resolution),
            np.linspace(S.min(), S.max(), resolution))


def visited_cells(split: Split, resolution=64):
    """Boolean ``(resolution, resolution)`` map [x_index, s_index] of grid nodes
    whose cell (nearest-node neighbourhood) contains at least one ground-truth state."""
    xs, ss = grid_axes(split, resolution)
    X = split.truth[:, :, 0].ravel()
    S = split.truth[:, :, 1].ravel()

    def nearest(v, axis):
        if axis[-1] == axis[0]:
            return np.zeros(v.shape, dtype=int)
        return np.clip(np.rint((v - axis[0]) / (axis[1] - axis[0])).astype(int),
                       0, axis.size - 1)

    hit = np.zeros((resolution, resolution), dtype=bool)
    hit[nearest(X, xs), nearest(S, ss)] = True
    return hit


def visited_region(split: Split, resolution=64) -> Region:
    """Grid nodes over the ground-truth bounding box that the test data actually visits."""
    xs, ss = grid_axes(split, resolution)
    hit = visited_cells(split, resolution)
    XX, SS = np.meshgrid(xs, ss, indexing="ij")
    return Region(XX[hit], SS[hit])


def mu_surface_error(p: MlpParams, cfg: BioreactorConfig, region: Region) -> float:
    """Root-mean-square gap between the network and the Haldane rate over ``region``."""
    if len(region) == 0:
        raise ContractError("empty region")
    diff = mlp_forward(p, region.X, region.S) - haldane_mu(region.S, cfg)
    return float(np.sqrt(np.mean(diff * diff)))
