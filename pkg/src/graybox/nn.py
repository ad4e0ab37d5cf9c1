"""Two-layer ReLU network used as the learned reaction rate mu(X, S).

The network maps a pair of inputs ``(x, s)`` to a scalar::

    mu_hat = w2 . relu(w1 @ (x, s) + b1) + b2

with ``w1`` of shape ``(hidden, 2)``. All evaluation helpers broadcast over
arbitrary leading input shapes so the same code serves a single point or a
whole batch of trajectories at one time step.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BlowupError, ConfigError, ContractError

INIT_SCHEMES = ("zeros", "uniform", "normal", "log-uniform", "log-normal")
_GROUPS = ("w1", "b1", "w2", "b2")


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    # clamp mu_hat at zero from below (mu_g is non-negative); off by default
    clamp: bool = False

    def __post_init__(self):
        w1, b1, w2 = _frozen(self.w1), _frozen(self.b1), _frozen(self.w2)
        if w1.ndim != 2 or w1.shape[1] != 2 or w1.shape[0] < 1:
            raise ContractError(f"w1 must have shape (hidden, 2), got {w1.shape}")
        hidden = w1.shape[0]
        if b1.shape != (hidden,) or w2.shape != (hidden,):
            raise ContractError(
                f"inconsistent shapes: w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}")
        b2 = float(self.b2)
        for name, a in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            if not np.all(np.isfinite(a)):
                raise BlowupError(f"non-finite entries in {name}")
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", b2)

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def size(self) -> int:
        return 4 * self.hidden + 1

    def to_vector(self) -> np.ndarray:
        """Flatten as ``[w1 (row-major), b1, w2, b2]``."""
        return np.concatenate([self.w1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def from_vector(cls, hidden, vec, clamp=False):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (4 * hidden + 1,):
            raise ContractError(f"expected {4 * hidden + 1} entries, got {vec.shape}")
        h2 = 2 * hidden
        return cls(vec[:h2].reshape(hidden, 2), vec[h2:h2 + hidden],
                   vec[h2 + hidden:h2 + 2 * hidden], vec[-1], clamp=clamp)

    def replace_vector(self, vec):
        return type(self).from_vector(self.hidden, vec, clamp=self.clamp)

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        return (self.clamp == other.clamp and self.hidden == other.hidden
                and np.array_equal(self.to_vector(), other.to_vector()))

    __hash__ = None


class MlpGrads(MlpParams):
    """Partial derivatives of a scalar loss, laid out like :class:`MlpParams`."""

    @classmethod
    def zeros(cls, hidden):
        return cls(np.zeros((hidden, 2)), np.zeros(hidden), np.zeros(hidden), 0.0)

    def __add__(self, other):
        return MlpGrads.from_vector(self.hidden, self.to_vector() + other.to_vector())

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_vector()))


def relu(x):
    return np.maximum(x, 0.0)


def _preact(p: MlpParams, x, s):
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    # elementwise on purpose: results per point must not depend on batch size
    return x[..., None] * p.w1[:, 0] + s[..., None] * p.w1[:, 1] + p.b1


def forward_terms(p: MlpParams, x, s):
    """Return ``(preactivations, mu_hat)`` with hidden units on the last axis."""
    pre = _preact(p, x, s)
    mu = (relu(pre) * p.w2).sum(axis=-1) + p.b2
    if p.clamp:
        mu = np.maximum(mu, 0.0)
    return pre, mu


def mlp_forward(p: MlpParams, x, s):
    """Evaluate the network at ``(x, s)``; scalars in give a float out."""
    _, mu = forward_terms(p, x, s)
    if not np.all(np.isfinite(mu)):
        raise BlowupError("non-finite network output")
    return float(mu) if np.ndim(mu) == 0 else mu


def backward_terms(p: MlpParams, pre, mu, upstream):
    """Per-point backward pass given the stored forward terms.

    Returns ``(d_pre, d_mu_raw, grad_x, grad_s)`` where ``d_pre`` carries the
    hidden-unit gradient (last axis) and ``d_mu_raw`` is the gradient reaching
    the linear output (zeroed where the clamp is active).
    """
    g = np.asarray(upstream, dtype=np.float64)
    if p.clamp:
        g = np.where(mu > 0.0, g, 0.0)
    # relu'(0) := 0
    d_pre = (g[..., None] * p.w2) * (pre > 0.0)
    gx = (d_pre * p.w1[:, 0]).sum(axis=-1)
    gs = (d_pre * p.w1[:, 1]).sum(axis=-1)
    return d_pre, g, gx, gs


def mlp_backward(p: MlpParams, x, s, upstream):
    """Reverse-mode pass of ``upstream * mlp_forward(p, x, s)``.

    For array inputs the parameter gradients are summed over all points while
    ``grad_x`` and ``grad_s`` keep the input shape.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(s))
            and np.all(np.isfinite(upstream))):
        raise BlowupError("non-finite input to mlp_backward")
    pre, mu = forward_terms(p, x, s)
    d_pre, g, gx, gs = backward_terms(p, pre, mu, np.broadcast_to(upstream, mu.shape))
    lead = tuple(range(d_pre.ndim - 1))
    gw1 = np.stack([(d_pre * x[..., None]).sum(axis=lead),
                    (d_pre * s[..., None]).sum(axis=lead)], axis=-1)
    grads = MlpGrads(gw1, d_pre.sum(axis=lead), (relu(pre) * g[..., None]).sum(axis=lead),
                     float(np.sum(g)))
    if np.ndim(gx) == 0:
        return grads, float(gx), float(gs)
    return grads, gx, gs


@dataclass(frozen=True)
class GroupInit:
    """Initialization of one parameter group.

    ``uniform`` draws from U(-scale, scale), ``normal`` from N(0, scale**2).
    ``log-uniform`` draws magnitudes with log|v| uniform on [log low, log high];
    ``log-normal`` draws magnitudes exp(N(log scale, sigma**2)). Log schemes
    then assign a random sign unless ``positive`` is set. ``scale=None`` for
    uniform/normal means He scaling sqrt(2 / fan_in).
    """
    scheme: str = "normal"
    scale: float | None = None
    low: float = 1e-3
    high: float = 1.0
    sigma: float = 1.0
    positive: bool = False

    def __post_init__(self):
        if self.scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.scheme!r}")
        if self.scale is not None and self.scale < 0:
            raise ConfigError("init scale must be non-negative")
        if self.scheme == "log-uniform" and not 0 < self.low <= self.high:
            raise ConfigError("log-uniform needs 0 < low <= high")
        if self.scheme == "log-normal" and (not self.scale or self.sigma <= 0):
            raise ConfigError("log-normal needs scale > 0 and sigma > 0")

    def draw(self, rng, shape, fan_in):
        if self.scheme == "zeros":
            return np.zeros(shape)
        if self.scheme in ("uniform", "normal"):
            scale = np.sqrt(2.0 / fan_in) if self.scale is None else self.scale
            if self.scheme == "uniform":
                return rng.uniform(-1.0, 1.0, size=shape) * scale
            return rng.standard_normal(shape) * scale
        if self.scheme == "log-uniform":
            mag = np.exp(rng.uniform(np.log(self.low), np.log(self.high), size=shape))
        else:
            mag = np.exp(np.log(self.scale) + self.sigma * rng.standard_normal(shape))
        if self.positive:
            return mag
        return mag * rng.choice([-1.0, 1.0], size=shape)


@dataclass(frozen=True)
class InitSpec:
    w1: GroupInit = field(default_factory=GroupInit)
    b1: GroupInit = field(default_factory=lambda: GroupInit("zeros"))
    w2: GroupInit = field(default_factory=GroupInit)
    b2: GroupInit = field(default_factory=lambda: GroupInit("zeros"))
    seed: int = 0
    clamp: bool = False

    @classmethod
    def all_groups(cls, group: GroupInit, seed=0):
        return cls(group, group, group, group, seed=seed)


def mlp_init(hidden: int, spec: InitSpec = InitSpec()) -> MlpParams:
    if int(hidden) != hidden or hidden < 1:
        raise ConfigError(f"hidden width must be a positive integer, got {hidden}")
    hidden = int(hidden)
    rng = np.random.default_rng(spec.seed)
    # fixed draw order: w1, b1, w2, b2
    w1 = spec.w1.draw(rng, (hidden, 2), fan_in=2)
    b1 = spec.b1.draw(rng, (hidden,), fan_in=2)
    w2 = spec.w2.draw(rng, (hidden,), fan_in=hidden)
    b2 = spec.b2.draw(rng, (), fan_in=hidden)
    return MlpParams(w1, b1, w2, float(b2), clamp=spec.clamp)


# Checkpoint layout (all little-endian):
#   8 bytes   magic b"GBXMLP\r\n"
#   uint32    format version (1)
#   uint32    flags (bit 0: output clamp)
#   uint64    hidden width H
#   float64   w1, H*2 values row-major, then b1 (H), w2 (H), b2 (1)
CHECKPOINT_MAGIC = b"GBXMLP\r\n"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIQ")


def checkpoint_bytes(p: MlpParams) -> bytes:
    head = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, int(p.clamp), p.hidden)
    return head + p.to_vector().astype("<f8").tobytes()


def params_from_bytes(data: bytes) -> MlpParams:
    if len(data) < _HEADER.size:
        raise ContractError("checkpoint truncated")
    magic, version, flags, hidden = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise ContractError("not a graybox checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    n = 4 * hidden + 1
    if len(data) != _HEADER.size + 8 * n:
        raise ContractError("checkpoint length does not match hidden width")
    vec = np.frombuffer(data, dtype="<f8", count=n, offset=_HEADER.size)
    return MlpParams.from_vector(hidden, vec.astype(np.float64), clamp=bool(flags & 1))


def save_checkpoint(p: MlpParams, path):
    Path(path).write_bytes(checkpoint_bytes(p))


def load_checkpoint(path) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes())
