import numpy as np
import pytest

from graybox.adjoint import simulate
from graybox.datagen import Corpus, GenConfig, Split, generate_corpus
from graybox.dynamics import BioreactorConfig
from graybox.nn import GroupInit, InitSpec, mlp_init


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def small_batch(n_steps, n_samples=2, seed=0):
    """Seeded ground-truth batch under the Haldane rate."""
    cfg = BioreactorConfig(n_steps=n_steps)
    gen = GenConfig(n_train=n_samples, n_validation=0, n_test=0)
    return generate_corpus(seed, cfg, gen).train, cfg


def random_params(hidden=4, seed=0, bias_scale=0.5):
    return mlp_init(hidden, InitSpec(b1=GroupInit("normal", bias_scale),
                                     b2=GroupInit("normal", 0.05), seed=seed))


def self_generated(corpus: Corpus, p) -> Corpus:
    """Replace every ground truth with the trajectory produced by ``p`` itself."""
    parts = {}
    for name in ("train", "validation", "test"):
        sp = corpus.split(name)
        states, _ = simulate(p, sp.x0, sp.s_in, corpus.cfg)
        parts[name] = Split(sp.x0, sp.s_in, states)
    return Corpus(parts["train"], parts["validation"], parts["test"], corpus.seed,
                  corpus.cfg, corpus.gen)


@pytest.fixture
def tiny_corpus():
    cfg = BioreactorConfig(n_steps=64)
    gen = GenConfig(n_train=8, n_validation=8, n_test=8)
    return generate_corpus(5, cfg, gen)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
