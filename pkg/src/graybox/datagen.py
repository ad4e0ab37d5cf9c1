"""Seeded synthetic corpora for the bioreactor identification problem.

Every sample draws from its own random stream keyed by
``(seed, split, index, attempt)``, so splits are independent and any sample
can be regenerated in isolation. A sample whose ground truth blows up is
redrawn with the next ``attempt``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dynamics import BioreactorConfig, State, Trajectory, fmt, haldane_fn, integrate_arrays
from .errors import ConfigError, ContractError

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class GenConfig:
    """Distributions for initial states and feed-concentration walks.

    Variances follow the reference setup; means, the volume floor and the
    reflection policy keep the drawn systems physical (V > 0, X, S >= 0).
    """
    x0_var: float = 0.1
    s0_var: float = 0.01
    v0_var: float = 2.0
    x0_mean: float = 0.0
    s0_mean: float = 0.0
    v0_mean: float = 5.0
    v_min: float = 0.5
    sin0_mean: float = 1.0
    sin0_var: float = 0.04
    sin_step_var: float = 0.01
    reflect_sin: bool = True
    n_train: int = 1024
    n_validation: int = 1024
    n_test: int = 1024
    max_reject_rate: float = 0.01

    def __post_init__(self):
        for f in ("x0_var", "s0_var", "v0_var", "sin0_var", "sin_step_var"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be non-negative")
        if not self.v_min > 0:
            raise ConfigError("v_min must be positive")
        for f in ("n_train", "n_validation", "n_test"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be non-negative")

    def split_size(self, split):
        return {"train": self.n_train, "validation": self.n_validation,
                "test": self.n_test}[split]


class Sample(NamedTuple):
    x0: State
    s_in: np.ndarray


def draw_initial_raw(rng, gen: GenConfig) -> np.ndarray:
    """Pre-policy normal draws of ``(X0, S0, V0)``."""
    mean = np.array([gen.x0_mean, gen.s0_mean, gen.v0_mean])
    sd = np.sqrt([gen.x0_var, gen.s0_var, gen.v0_var])
    return mean + sd * rng.standard_normal(3)


def initial_policy(raw, gen: GenConfig) -> State:
    x, s, v = raw
    return State(abs(float(x)), abs(float(s)), max(float(v), gen.v_min))


def sample_initial_state(rng, gen: GenConfig = GenConfig()) -> State:
    return initial_policy(draw_initial_raw(rng, gen), gen)


def draw_sin_raw(rng, n_steps, gen: GenConfig) -> np.ndarray:
    """Pre-policy random walk: start value plus cumulative normal increments."""
    start = gen.sin0_mean + np.sqrt(gen.sin0_var) * rng.standard_normal()
    incr = np.sqrt(gen.sin_step_var) * rng.standard_normal(n_steps - 1)
    return start + np.concatenate([[0.0], np.cumsum(incr)])


def sample_sin_series(rng, n_steps: int, gen: GenConfig = GenConfig()) -> np.ndarray:
    """Random-walk feed concentration, reflected at zero after every increment.

    Uses the same draws as :func:`draw_sin_raw`; with ``reflect_sin`` off the
    raw walk is returned.
    """
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    raw = draw_sin_raw(rng, n_steps, gen)
    if not gen.reflect_sin:
        return raw
    out = np.empty(n_steps)
    out[0] = abs(raw[0])
    incr = np.diff(raw)
    for k in range(1, n_steps):
        out[k] = abs(out[k - 1] + incr[k - 1])
    return out


def sample_rng(seed: int, split: str, index: int, attempt: int = 0):
    ss = np.random.SeedSequence(seed, spawn_key=(SPLITS.index(split), index, attempt))
    return np.random.default_rng(ss)


def draw_sample(seed, split, index, attempt, n_steps, gen) -> Sample:
    rng = sample_rng(seed, split, index, attempt)
    x0 = sample_initial_state(rng, gen)
    return Sample(x0, sample_sin_series(rng, n_steps, gen))


@dataclass(frozen=True, eq=False)
class Split:
    """A set of samples with their ground-truth trajectories, stored as arrays."""
    x0: np.ndarray      # (N, 3)
    s_in: np.ndarray    # (N, n)
    truth: np.ndarray   # (N, n + 1, 3)

    def __post_init__(self):
        N = self.x0.shape[0]
        if self.s_in.shape[0] != N or self.truth.shape[0] != N \
                or self.truth.shape[1] != self.s_in.shape[1] + 1:
            raise ContractError("inconsistent split arrays")

    def __len__(self):
        return self.x0.shape[0]

    @property
    def n_steps(self) -> int:
        return self.s_in.shape[1]

    def __getitem__(self, i):
        return (Sample(State(*self.x0[i]), self.s_in[i]),
                Trajectory(self.truth[i], self.s_in[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def take(self, idx) -> "Split":
        idx = np.asarray(idx)
        return Split(self.x0[idx], self.s_in[idx], self.truth[idx])

    def __eq__(self, other):
        return (isinstance(other, Split) and np.array_equal(self.x0, other.x0)
                and np.array_equal(self.s_in, other.s_in)
                and np.array_equal(self.truth, other.truth))

    __hash__ = None

    @classmethod
    def from_pairs(cls, pairs):
        pairs = list(pairs)
        return cls(np.array([np.asarray(s.x0, dtype=np.float64) for s, _ in pairs]),
                   np.array([s.s_in for s, _ in pairs], dtype=np.float64),
                   np.array([t.states for _, t in pairs]))


@dataclass(frozen=True, eq=False)
class Corpus:
    train: Split
    validation: Split
    test: Split
    seed: int
    cfg: BioreactorConfig
    gen: GenConfig
    rejections: int = 0

    def split(self, name) -> Split:
        return getattr(self, name)

    def __eq__(self, other):
        return (isinstance(other, Corpus) and self.seed == other.seed
                and self.cfg == other.cfg and self.gen == other.gen
                and all(self.split(s) == other.split(s) for s in SPLITS))

    __hash__ = None


def generate_split(seed, split, cfg: BioreactorConfig, gen: GenConfig, size=None):
    """Generate one split; returns ``(Split, n_rejected)``."""
    size = gen.split_size(split) if size is None else size
    n = cfg.n_steps
    x0 = np.empty((size, 3))
    s_in = np.empty((size, n))
    truth = np.empty((size, n + 1, 3))
    attempts = np.zeros(size, dtype=np.int64)
    todo = np.arange(size)
    budget = int(np.floor(gen.max_reject_rate * max(size, 1)))
    rejected = 0
    mu_fn = haldane_fn(cfg)
    while todo.size:
        for i in todo:
            smp = draw_sample(seed, split, int(i), int(attempts[i]), n, gen)
            x0[i] = smp.x0
            s_in[i] = smp.s_in
        states, _, bad = integrate_arrays(x0[todo], s_in[todo], mu_fn, cfg)
        truth[todo] = states
        failed = todo[bad >= 0]
        rejected += failed.size
        if rejected > budget:
            raise ConfigError(
                f"{rejected} of {size} {split} ground truths blew up; "
                "the dynamics configuration is unstable")
        attempts[failed] += 1
        todo = failed
    return Split(x0, s_in, truth), rejected


def generate_corpus(seed: int, cfg: BioreactorConfig = BioreactorConfig(),
                    gen: GenConfig = GenConfig()) -> Corpus:
    splits = {}
    rejections = 0
    for name in SPLITS:
        splits[name], r = generate_split(seed, name, cfg, gen)
        rejections += r
    return Corpus(splits["train"], splits["validation"], splits["test"], seed, cfg, gen,
                  rejections)


def coarsen(item, factor: int, cfg: BioreactorConfig):
    """Subsample a (Sample, Trajectory) pair or a :class:`Split` in time.

    Keeps every ``factor``-th input and state starting at index 0, so the
    coarse series spans the same interval. Returns ``(item', cfg')`` with
    ``cfg'.dt = cfg.dt * factor``.
    """
    if int(factor) != factor or factor < 1:
        raise ContractError(f"coarsening factor must be a positive integer, got {factor}")
    if cfg.n_steps % factor:
        raise ContractError(f"factor {factor} does not divide n_steps={cfg.n_steps}")
    new_cfg = replace(cfg, dt=cfg.dt * factor, n_steps=cfg.n_steps // factor)
    if isinstance(item, Split):
        if item.n_steps != cfg.n_steps:
            raise ContractError("split horizon does not match config")
        return Split(item.x0, item.s_in[:, ::factor], item.truth[:, ::factor]), new_cfg
    sample, traj = item
    if len(sample.s_in) != cfg.n_steps or traj.n_steps != cfg.n_steps:
        raise ContractError("sample horizon does not match config")
    s_in = np.asarray(sample.s_in)[::factor]
    return (Sample(sample.x0, s_in), Trajectory(traj.states[::factor], s_in)), new_cfg


def coarsen_corpus(corpus: Corpus, factor: int) -> Corpus:
    parts = {}
    cfg = corpus.cfg
    for name in SPLITS:
        parts[name], cfg = coarsen(corpus.split(name), factor, corpus.cfg)
    return replace(corpus, cfg=cfg, **parts)


def visited_region(split: Split):
    """Bounding box ``((X_lo, X_hi), (S_lo, S_hi))`` of the ground-truth states."""
    X = split.truth[:, :, 0]
    S = split.truth[:, :, 1]
    return (float(X.min()), float(X.max())), (float(S.min()), float(S.max()))


def running_maxima(split: Split):
    """Per-step max over samples of X and S, and their running maxima."""
    mx = split.truth[:, :, 0].max(axis=0)
    ms = split.truth[:, :, 1].max(axis=0)
    return mx, ms, np.maximum.accumulate(mx), np.maximum.accumulate(ms)


def write_stats_csv(split: Split, path, dt=None):
    mx, ms, rx, rs = running_maxima(split)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "max_X", "max_S", "running_max_X", "running_max_S"])
        for t in range(mx.size):
            w.writerow([t if dt is None else fmt(t * dt), fmt(mx[t]), fmt(ms[t]),
                        fmt(rx[t]), fmt(rs[t])])


# Corpus file layout (little-endian):
#   8 bytes   magic b"GBXCORP\n"
#   uint32    format version (1)
#   uint32    header length L
#   L bytes   UTF-8 header: sorted "key=value" lines (seed, n_* sizes,
#             byte_order, every BioreactorConfig / GenConfig field prefixed
#             by "cfg." / "gen.")
#   then for each split in order train, validation, test and each sample:
#             float64 x0[3], s_in[n], truth[(n+1)*3] (row-major)
CORPUS_MAGIC = b"GBXCORP\n"
CORPUS_VERSION = 1
_HEAD = struct.Struct("<8sII")


def _header_text(corpus: Corpus) -> str:
    kv = {"seed": corpus.seed, "byte_order": "little", "rejections": corpus.rejections}
    for name in SPLITS:
        kv[f"n_{name}"] = len(corpus.split(name))
    for k, v in asdict(corpus.cfg).items():
        kv[f"cfg.{k}"] = v
    for k, v in asdict(corpus.gen).items():
        kv[f"gen.{k}"] = v
    return "".join(f"{k}={_canon(v)}\n" for k, v in sorted(kv.items()))


def _canon(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(value: str, kind):
    if kind is bool or kind == "bool":
        return value == "true"
    if kind is int or kind == "int":
        return int(value)
    return float(value)


def corpus_bytes(corpus: Corpus) -> bytes:
    head = _header_text(corpus).encode()
    chunks = [_HEAD.pack(CORPUS_MAGIC, CORPUS_VERSION, len(head)), head]
    for name in SPLITS:
        sp = corpus.split(name)
        rec = np.concatenate([sp.x0, sp.s_in, sp.truth.reshape(len(sp), -1)], axis=1)
        chunks.append(rec.astype("<f8").tobytes())
    return b"".join(chunks)


def save_corpus(corpus: Corpus, path):
    Path(path).write_bytes(corpus_bytes(corpus))


def load_corpus(path) -> Corpus:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise ContractError("corpus file truncated")
    magic, version, hlen = _HEAD.unpack_from(data)
    if magic != CORPUS_MAGIC:
        raise ContractError("not a graybox corpus file (bad magic)")
    if version != CORPUS_VERSION:
        raise ContractError(f"unsupported corpus version {version}")
    text = data[_HEAD.size:_HEAD.size + hlen].decode()
    kv = dict(line.split("=", 1) for line in text.splitlines() if line)
    if kv.get("byte_order") != "little":
        raise ContractError("unsupported byte order")
    cfg = BioreactorConfig(**{f.name: _parse(kv[f"cfg.{f.name}"], f.type)
                              for f in fields(BioreactorConfig)})
    gen = GenConfig(**{f.name: _parse(kv[f"gen.{f.name}"], f.type)
                       for f in fields(GenConfig)})
    n = cfg.n_steps
    width = 3 + n + 3 * (n + 1)
    offset = _HEAD.size + hlen
    parts = {}
    for name in SPLITS:
        count = int(kv[f"n_{name}"])
        rec = np.frombuffer(data, dtype="<f8", count=count * width, offset=offset)
        rec = rec.astype(np.float64).reshape(count, width)
        offset += 8 * count * width
        parts[name] = Split(rec[:, :3].copy(), rec[:, 3:3 + n].copy(),
                            rec[:, 3 + n:].reshape(count, n + 1, 3).copy())
    if offset != len(data):
        raise ContractError("corpus file length does not match its header")
    return Corpus(parts["train"], parts["validation"], parts["test"], int(kv["seed"]),
                  cfg, gen, int(kv["rejections"]))
