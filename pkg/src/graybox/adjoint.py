"""Masked trajectory losses and exact gradients through the unrolled Euler steps.

Mask index ``k`` refers to the output of Euler step ``k``, i.e. trajectory
state ``k + 1``; the initial state is given and never scored. Volume is
never scored.

The forward pass keeps every state; the backward sweep runs from the last
step to the first, carrying the adjoint of the state (dL/dX, dL/dS, dL/dV)
through the Euler Jacobian and the network's reverse pass. Work is
vectorized over the samples of a batch, and every per-sample quantity is
computed with elementwise operations only, so results do not depend on how
a batch is chunked across threads.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dynamics import BioreactorConfig, Trajectory, _euler_arrays
from .errors import BlowupError, ConfigError, ContractError
from .nn import MlpGrads, MlpParams, backward_terms, forward_terms, relu

ADEQUATE_LOSS = 3e-5
MASK_MODES = ("s_only_dense", "xs_every_8th", "xs_dense")


@dataclass(frozen=True, eq=False)
class ObservationMask:
    observe_x: np.ndarray
    observe_s: np.ndarray

    def __post_init__(self):
        ox = np.array(self.observe_x, dtype=bool)
        os_ = np.array(self.observe_s, dtype=bool)
        if ox.ndim != 1 or ox.shape != os_.shape:
            raise ContractError("mask channels must be 1-d and of equal length")
        if not (ox.any() or os_.any()):
            raise ContractError("mask observes nothing")
        ox.flags.writeable = False
        os_.flags.writeable = False
        object.__setattr__(self, "observe_x", ox)
        object.__setattr__(self, "observe_s", os_)

    @property
    def n_steps(self) -> int:
        return self.observe_x.shape[0]

    @property
    def n_observed_steps(self) -> int:
        return int(np.count_nonzero(self.observe_x | self.observe_s))

    def weights(self) -> np.ndarray:
        """``(n, 3)`` 0/1 weights over (X, S, V) per step."""
        w = np.zeros((self.n_steps, 3))
        w[:, 0] = self.observe_x
        w[:, 1] = self.observe_s
        return w


def make_mask(mode: str, n_steps: int) -> ObservationMask:
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    on = np.ones(n_steps, dtype=bool)
    off = np.zeros(n_steps, dtype=bool)
    if mode == "s_only_dense":
        return ObservationMask(off, on)
    if mode == "xs_dense":
        return ObservationMask(on, on)
    if mode == "xs_every_8th":
        sparse = (np.arange(n_steps) % 8) == 7
        if not sparse.any():
            raise ConfigError(f"xs_every_8th needs at least 8 steps, got {n_steps}")
        return ObservationMask(sparse, sparse)
    raise ConfigError(f"unknown mask mode {mode!r}; expected one of {MASK_MODES}")


@dataclass(frozen=True)
class LossReport:
    total: float
    per_sample_per_step: float
    loss_ratio: float
    n_samples: int = 1
    n_observed_steps: int = 1

    @classmethod
    def from_total(cls, total, n_samples, n_observed_steps):
        per = float(total) / (n_samples * n_observed_steps)
        return cls(float(total), per, per / ADEQUATE_LOSS, int(n_samples),
                   int(n_observed_steps))


def trajectory_loss(pred: Trajectory, truth: Trajectory, mask: ObservationMask) -> LossReport:
    if pred.states.shape != truth.states.shape or pred.n_steps != mask.n_steps:
        raise ContractError(
            f"horizon mismatch: pred {pred.n_steps}, truth {truth.n_steps}, mask {mask.n_steps}")
    total = float(_masked_sq_error(pred.states[None], truth.states[None], mask.weights())[0])
    return LossReport.from_total(total, 1, mask.n_observed_steps)


# ---------------------------------------------------------------------------
# batched forward / backward


def batch_arrays(batch):
    """Return ``(x0, s_in, truth)`` arrays for a split or (Sample, Trajectory) pairs."""
    if hasattr(batch, "x0") and hasattr(batch, "truth"):
        return batch.x0, batch.s_in, batch.truth
    pairs = list(batch)
    if not pairs:
        raise ContractError("empty batch")
    x0 = np.array([np.asarray(s.x0, dtype=np.float64) for s, _ in pairs])
    s_in = np.array([s.s_in for s, _ in pairs], dtype=np.float64)
    truth = np.array([t.states for _, t in pairs])
    return x0, s_in, truth


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GRAYBOX_THREADS", "1")))
    except ValueError:
        raise ConfigError("GRAYBOX_THREADS must be an integer") from None


def _chunked(fn, n_samples, *arrays):
    """Apply ``fn(offset, *chunk_arrays)`` to contiguous sample chunks.

    Results are concatenated in sample order. If several chunks blow up, the
    error with the earliest (step, sample) is raised, as a serial run would.
    """
    k = min(worker_count(), n_samples)
    if k <= 1:
        return fn(0, *arrays)
    bounds = np.linspace(0, n_samples, k + 1).astype(int)

    def run(lo, hi):
        try:
            return fn(lo, *(a[lo:hi] for a in arrays))
        except BlowupError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=k) as ex:
        results = list(ex.map(run, bounds[:-1], bounds[1:]))
    errors = [r for r in results if isinstance(r, BlowupError)]
    if errors:
        raise min(errors, key=lambda e: (e.step if e.step is not None else -1,
                                         e.sample if e.sample is not None else -1))
    if isinstance(results[0], tuple):
        return tuple(np.concatenate(r) for r in zip(*results))
    return np.concatenate(results)


def simulate(p: MlpParams, x0, s_in, cfg: BioreactorConfig, sample_offset=0):
    """Integrate a batch under the network rate.

    Returns ``(states (B, n+1, 3), mus (B, n))``. Raises :class:`BlowupError`
    naming the first sample (by batch position plus ``sample_offset``) and
    step at which a state leaves ``cfg.bound``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    s_in = np.asarray(s_in, dtype=np.float64)
    B, n = s_in.shape
    if n != cfg.n_steps:
        raise ContractError(f"s_in has {n} steps, config expects {cfg.n_steps}")
    states = np.empty((B, n + 1, 3))
    mus = np.empty((B, n))
    states[:, 0] = x0
    X, S, V = x0[:, 0], x0[:, 1], x0[:, 2]
    if np.any(~(V > 0)):
        raise BlowupError("initial volume must be positive")
    with np.errstate(all="ignore"):
        for t in range(n):
            _, mu = forward_terms(p, X, S)
            mus[:, t] = mu
            X, S, V = _euler_arrays(X, S, V, mu, s_in[:, t], cfg)
            ok = (np.abs(X) <= cfg.bound) & (np.abs(S) <= cfg.bound) & (np.abs(V) <= cfg.bound)
            if not ok.all():
                b = int(np.flatnonzero(~ok)[0])
                raise BlowupError(
                    f"blowup in sample {b + sample_offset} at step {t}",
                    sample=b + sample_offset, step=t)
            states[:, t + 1, 0] = X
            states[:, t + 1, 1] = S
            states[:, t + 1, 2] = V
    return states, mus


def per_sample_losses(p, batch, mask: ObservationMask, cfg: BioreactorConfig):
    """Masked squared-error loss of every sample in the batch, shape ``(B,)``."""
    x0, s_in, truth = batch_arrays(batch)
    _check_mask(mask, cfg)
    w = mask.weights()

    def run(offset, x0, s_in, truth):
        states, _ = simulate(p, x0, s_in, cfg, sample_offset=offset)
        return _masked_sq_error(states, truth, w)

    return _chunked(run, x0.shape[0], x0, s_in, truth)


def batch_loss(p, batch, mask, cfg) -> LossReport:
    losses = per_sample_losses(p, batch, mask, cfg)
    return LossReport.from_total(_ordered_sum(losses), len(losses), mask.n_observed_steps)


def _ordered_sum(a):
    """Sum over the leading (sample) axis strictly in index order."""
    acc = np.zeros_like(a[0])
    for row in a:
        acc = acc + row
    return acc


def _check_mask(mask, cfg):
    if mask.n_steps != cfg.n_steps:
        raise ContractError(f"mask length {mask.n_steps} does not match n_steps {cfg.n_steps}")


def _masked_sq_error(states, truth, w):
    """Per-sample masked squared error, summed per channel before adding
    channels so that the loss is exactly additive over disjoint channel masks."""
    d = states[:, 1:, :2] - truth[:, 1:, :2]
    per_channel = (d * d * w[:, :2]).sum(axis=1)
    return per_channel[:, 0] + per_channel[:, 1]


def _sample_gradients(p: MlpParams, x0, s_in, truth, w, cfg: BioreactorConfig, offset=0):
    """Per-sample losses and parameter gradients for one chunk of samples."""
    states, mus = simulate(p, x0, s_in, cfg, sample_offset=offset)
    B, n = s_in.shape
    H = p.hidden
    resid = states[:, 1:] - truth[:, 1:]
    losses = _masked_sq_error(states, truth, w)
    dstate = 2.0 * resid * w  # dL/d states[1:]

    gw1 = np.zeros((B, H, 2))
    gb1 = np.zeros((B, H))
    gw2 = np.zeros((B, H))
    gb2 = np.zeros(B)
    lam = np.zeros((B, 3))
    dt, F, k1 = cfg.dt, cfg.F, cfg.k1
    for t in range(n - 1, -1, -1):
        lam = lam + dstate[:, t]
        X, S, V = states[:, t, 0], states[:, t, 1], states[:, t, 2]
        mu = mus[:, t]
        lx, ls, lv = lam[:, 0], lam[:, 1], lam[:, 2]
        # d(X', S')/d mu = (dt X, -dt k1 X)
        g_mu = dt * X * (lx - k1 * ls)
        pre, _ = forward_terms(p, X, S)
        d_pre, g_out, gx, gs = backward_terms(p, pre, mu, g_mu)
        gw1[:, :, 0] += d_pre * X[:, None]
        gw1[:, :, 1] += d_pre * S[:, None]
        gb1 += d_pre
        gw2 += relu(pre) * g_out[:, None]
        gb2 += g_out
        inv_v = 1.0 / V
        new_x = lx * (1.0 + dt * (mu - F * inv_v)) - ls * (dt * k1 * mu) + gx
        new_s = ls * (1.0 - dt * F * inv_v) + gs
        new_v = (lx * (dt * F * X * inv_v * inv_v)
                 - ls * (dt * F * (s_in[:, t] - S) * inv_v * inv_v) + lv)
        lam = np.stack([new_x, new_s, new_v], axis=1)
    return losses, gw1, gb1, gw2, gb2


def bptt_gradient(p: MlpParams, batch, mask: ObservationMask, cfg: BioreactorConfig):
    """Exact gradient of the batch's total masked loss w.r.t. the parameters.

    Returns ``(MlpGrads, LossReport)``. Gradients are summed over samples in
    index order.
    """
    x0, s_in, truth = batch_arrays(batch)
    _check_mask(mask, cfg)
    w = mask.weights()
    losses, gw1, gb1, gw2, gb2 = _chunked(
        lambda off, a, b, c: _sample_gradients(p, a, b, c, w, cfg, off),
        x0.shape[0], x0, s_in, truth)
    with np.errstate(all="ignore"):
        vec = np.concatenate([_ordered_sum(gw1).ravel(), _ordered_sum(gb1),
                              _ordered_sum(gw2), [_ordered_sum(gb2)]])
    if not np.all(np.isfinite(vec)):
        raise BlowupError("non-finite gradient")
    grads = MlpGrads.from_vector(p.hidden, vec)
    return grads, LossReport.from_total(_ordered_sum(losses), len(losses), mask.n_observed_steps)


def fd_gradient(p: MlpParams, batch, mask: ObservationMask, cfg: BioreactorConfig,
                step: float = 1e-6) -> MlpGrads:
    """Central finite differences of the batch total loss, one parameter at a time."""
    if not step > 0:
        raise ConfigError("finite-difference step must be positive")
    base = p.to_vector()
    out = np.empty_like(base)
    for i in range(base.size):
        hi = base.copy()
        lo = base.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = batch_loss(p.replace_vector(hi), batch, mask, cfg).total
        f_lo = batch_loss(p.replace_vector(lo), batch, mask, cfg).total
        out[i] = (f_hi - f_lo) / (2.0 * step)
    return MlpGrads.from_vector(p.hidden, out)


def min_preactivation(p: MlpParams, batch, cfg: BioreactorConfig) -> float:
    """Smallest |preactivation| met along the batch's trajectories (kink check)."""
    x0, s_in, _ = batch_arrays(batch)
    states, _ = simulate(p, x0, s_in, cfg)
    pre, _ = forward_terms(p, states[:, :-1, 0], states[:, :-1, 1])
    return float(np.abs(pre).min())
