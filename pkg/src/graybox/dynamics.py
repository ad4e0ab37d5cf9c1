"""Fedbatch bioreactor model and its explicit Euler discretization.

State is ``(X, S, V)``: reactant concentration, substrate concentration and
total volume. With reaction rate ``mu``, feed rate ``F`` and feed substrate
concentration ``S_in``::

    dX/dt = mu X - F X / V
    dS/dt = -k1 mu X + F (S_in - S) / V
    dV/dt = F
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import BlowupError, ConfigError, ContractError, DomainError


class State(NamedTuple):
    X: float
    S: float
    V: float


@dataclass(frozen=True)
class BioreactorConfig:
    """Known model constants plus the Haldane ground-truth constants.

    The defaults are this package's own choice: they make the visited
    (X, S) region keep growing over thousands of steps.
    """
    k1: float = 2.0
    F: float = 0.05
    dt: float = 0.05
    n_steps: int = 2048
    mu_star: float = 0.5
    K_m: float = 0.12
    K_i: float = 0.9
    bound: float = 1e6

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError("n_steps must be a positive integer")
        if not self.F >= 0:
            raise ConfigError("F must be non-negative")
        for name in ("k1", "mu_star", "K_m", "K_i", "bound"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def replace(self, **changes) -> "BioreactorConfig":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """``states[t]`` is the state after ``t`` Euler steps; ``s_in[t]`` drives step t."""
    states: np.ndarray
    s_in: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=np.float64)
        s_in = np.array(self.s_in, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != 3 or s_in.shape != (states.shape[0] - 1,):
            raise ContractError(
                f"inconsistent trajectory shapes {states.shape} / {s_in.shape}")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(s_in))):
            raise BlowupError("trajectory contains non-finite values")
        states.flags.writeable = False
        s_in.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "s_in", s_in)

    @property
    def n_steps(self) -> int:
        return self.s_in.shape[0]

    @property
    def X(self):
        return self.states[:, 0]

    @property
    def S(self):
        return self.states[:, 1]

    @property
    def V(self):
        return self.states[:, 2]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (np.array_equal(self.states, other.states)
                and np.array_equal(self.s_in, other.s_in))

    __hash__ = None


def haldane_mu(s, cfg: BioreactorConfig):
    """Substrate-inhibited growth rate; does not depend on X."""
    s = np.asarray(s, dtype=np.float64)
    mu = s * cfg.mu_star / (s + cfg.K_m + s * s / cfg.K_i)
    return float(mu) if mu.ndim == 0 else mu


def haldane_fn(cfg: BioreactorConfig) -> Callable:
    """``mu_fn(X, S)`` wrapper around :func:`haldane_mu`."""
    return lambda X, S: haldane_mu(S, cfg)


def _rhs_arrays(X, S, V, mu, s_in, cfg):
    dX = mu * X - cfg.F * X / V
    dS = -cfg.k1 * mu * X + cfg.F * (s_in - S) / V
    return dX, dS


def rhs(st: State, mu_val: float, s_in: float, cfg: BioreactorConfig):
    X, S, V = st
    if not V > 0:
        raise DomainError(f"volume must be positive, got V={V}")
    dX, dS = _rhs_arrays(X, S, V, mu_val, s_in, cfg)
    return float(dX), float(dS), float(cfg.F)


def _euler_arrays(X, S, V, mu, s_in, cfg):
    dX, dS = _rhs_arrays(X, S, V, mu, s_in, cfg)
    return X + cfg.dt * dX, S + cfg.dt * dS, V + cfg.dt * cfg.F


def euler_step(st: State, s_in: float, mu_val: float, cfg: BioreactorConfig,
               step: int | None = None) -> State:
    X, S, V = st
    if not V > 0:
        raise DomainError(f"volume must be positive, got V={V}", step=step)
    with np.errstate(all="ignore"):
        out = State(*(float(v) for v in _euler_arrays(X, S, V, mu_val, s_in, cfg)))
    if not all(np.isfinite(out)):
        raise BlowupError(f"non-finite state after step {step}", step=step)
    return out


def integrate_arrays(x0, s_in, mu_fn, cfg: BioreactorConfig):
    """Batched Euler integration without raising on blowup.

    ``x0`` has shape ``(B, 3)`` and ``s_in`` shape ``(B, n)``. Returns
    ``(states, mus, bad_step)`` with ``states`` of shape ``(B, n+1, 3)``,
    the rate used at every step in ``mus`` ``(B, n)``, and ``bad_step[b]``
    the first step whose output left the finite ``cfg.bound`` box (or -1).
    Samples that blew up keep integrating on garbage; callers must check.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    s_in = np.asarray(s_in, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[1] != 3 or s_in.ndim != 2 or s_in.shape[0] != x0.shape[0]:
        raise ContractError(f"bad batch shapes {x0.shape}, {s_in.shape}")
    if np.any(~(x0[:, 2] > 0)):
        raise DomainError("initial volume must be positive", step=0)
    B, n = s_in.shape
    states = np.empty((B, n + 1, 3))
    mus = np.empty((B, n))
    states[:, 0] = x0
    X, S, V = x0[:, 0].copy(), x0[:, 1].copy(), x0[:, 2].copy()
    bad = np.full(B, -1, dtype=np.int64)
    with np.errstate(all="ignore"):
        for t in range(n):
            mu = np.broadcast_to(np.asarray(mu_fn(X, S), dtype=np.float64), X.shape)
            mus[:, t] = mu
            X, S, V = _euler_arrays(X, S, V, mu, s_in[:, t], cfg)
            states[:, t + 1, 0] = X
            states[:, t + 1, 1] = S
            states[:, t + 1, 2] = V
            over = ~((np.abs(X) <= cfg.bound) & (np.abs(S) <= cfg.bound)
                     & (np.abs(V) <= cfg.bound))
            if over.any():
                bad[over & (bad < 0)] = t
    return states, mus, bad


def integrate(x0: State, s_in_series, mu_fn: Callable, cfg: BioreactorConfig) -> Trajectory:
    """Unroll ``cfg.n_steps`` Euler steps from ``x0`` driven by ``s_in_series``.

    Raises :class:`BlowupError` (with the first offending step) when a state
    component leaves ``[-cfg.bound, cfg.bound]`` or becomes non-finite.
    """
    s_in = np.asarray(s_in_series, dtype=np.float64)
    if s_in.shape != (cfg.n_steps,):
        raise ContractError(f"s_in length {s_in.shape} does not match n_steps={cfg.n_steps}")
    states, _, bad = integrate_arrays(np.asarray(x0, dtype=np.float64)[None], s_in[None],
                                      mu_fn, cfg)
    if bad[0] >= 0:
        raise BlowupError(f"state left the bound {cfg.bound:g} at step {bad[0]}",
                          sample=0, step=int(bad[0]))
    return Trajectory(states[0], s_in)


def write_trajectory_csv(traj: Trajectory, path, dt: float | None = None):
    """Write ``t,X,S,V,S_in`` rows; ``t`` is the step index unless ``dt`` is given.

    The final state has no driving input, so its ``S_in`` cell is empty.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "X", "S", "V", "S_in"])
        for t, (X, S, V) in enumerate(traj.states):
            tt = t if dt is None else fmt(t * dt)
            sin = fmt(traj.s_in[t]) if t < traj.n_steps else ""
            w.writerow([tt, fmt(X), fmt(S), fmt(V), sin])


def fmt(v) -> str:
    return "%.17g" % v
