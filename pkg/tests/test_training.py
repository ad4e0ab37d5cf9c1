import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graybox.adjoint import LossReport, batch_loss, make_mask
from graybox.dynamics import BioreactorConfig, haldane_mu
from graybox.errors import ConfigError, ContractError
from graybox.nn import GroupInit, InitSpec, MlpGrads, MlpParams, mlp_init
from graybox.training import (ADEQUATE_PERFORMANCE, BLOWUP_ABORT, CONTINUE,
                              GENERALIZATION_FAILURE, IMPROVEMENT_FAILURE, AdamState, Region,
                              StopMonitor, TrainConfig, TrainHistory, TrainingAborted,
                              adam_step, check_stopping, clip_gradient, evaluate,
                              evaluate_per_sample, mu_surface_error, run_epoch,
                              train_two_stage, visited_region)

from conftest import self_generated


def rep(per_step):
    return LossReport.from_total(per_step, 1, 1)


def gentle_params(hidden=8, seed=0):
    p = mlp_init(hidden, InitSpec(w2=GroupInit("normal", 0.01), seed=seed))
    return MlpParams(p.w1, p.b1, p.w2, 0.02)


# --- Adam -----------------------------------------------------------------


def scalar_params(v):
    return MlpParams([[v, 0.0]], [0.0], [0.0], 0.0)


def test_adam_zero_gradient_fixpoint():
    p = gentle_params()
    a = AdamState.fresh(p)
    for _ in range(5):
        a, q = adam_step(a, p, MlpGrads.zeros(p.hidden), 1e-3)
        assert q == p
    assert a.t == 5


def test_adam_first_step_magnitude_and_sign():
    p = gentle_params()
    g = MlpGrads.from_vector(p.hidden, np.linspace(-2, 2, p.size) + 0.01)
    a, q = adam_step(AdamState.fresh(p), p, g, 1e-4)
    delta = q.to_vector() - p.to_vector()
    assert np.all(np.sign(delta) == -np.sign(g.to_vector()))
    # t = 1: m_hat = g, v_hat = g^2, step = lr * |g| / (|g| + eps)
    expected = 1e-4 * np.abs(g.to_vector()) / (np.abs(g.to_vector()) + 1e-8)
    assert np.allclose(np.abs(delta), expected, rtol=1e-10, atol=0)


def test_adam_constant_gradient_closed_form():
    p = scalar_params(0.3)
    g = MlpGrads.from_vector(1, [0.7, 0, 0, 0, 0])
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    a = AdamState.fresh(p)
    expected = 0.3
    for k in range(1, 101):
        a, p = adam_step(a, p, g, lr)
        m = 0.7 * (1 - b1 ** k)
        v = 0.49 * (1 - b2 ** k)
        expected -= lr * (m / (1 - b1 ** k)) / (math.sqrt(v / (1 - b2 ** k)) + eps)
        assert abs(p.w1[0, 0] - expected) <= 1e-12
    assert a.t == 100 and np.all(a.v >= 0)


def test_adam_rejects_mismatched_shapes():
    p = gentle_params(4)
    with pytest.raises(ContractError):
        adam_step(AdamState.fresh(p), p, MlpGrads.zeros(3), 1e-3)


def test_clip_gradient():
    g = MlpGrads.from_vector(1, [3.0, 4.0, 0, 0, 0])
    assert clip_gradient(g, None) is g
    assert clip_gradient(g, 10.0) is g
    assert clip_gradient(g, 1.0).norm() == pytest.approx(1.0)


# --- stopping ---------------------------------------------------------------


def replay(train, val, **kw):
    mon = StopMonitor(**kw)
    for epoch, (t, v) in enumerate(zip(train, val)):
        d = check_stopping(mon, rep(t), rep(v))
        if d != CONTINUE:
            return epoch, d
    return None, CONTINUE


def test_adequate_performance_threshold():
    assert check_stopping(StopMonitor(), rep(1e-3), rep(2.9e-5)) == ADEQUATE_PERFORMANCE
    assert check_stopping(StopMonitor(), rep(1e-3), rep(3e-5)) == CONTINUE


def test_improvement_failure_after_twelve_flat_epochs():
    train = [1.0] * 30
    assert replay(train, train) == (12, IMPROVEMENT_FAILURE)


@pytest.mark.parametrize("best", [0, 3, 10])
def test_improvement_failure_at_best_plus_twelve(best):
    train = [1.0 - 0.01 * i for i in range(best + 1)] + [1.0] * 40
    assert replay(train, train) == (best + 12, IMPROVEMENT_FAILURE)


def test_improvement_counter_resets_on_strict_improvement():
    mon = StopMonitor()
    for _ in range(11):
        check_stopping(mon, rep(1.0), rep(1.0))
    check_stopping(mon, rep(0.5), rep(0.5))
    assert mon.epochs_since_improvement == 0


def test_generalization_failure_direct_ratio():
    mon = StopMonitor(best_val_loss=1.0)
    assert check_stopping(mon, rep(0.4), rep(1.0)) == GENERALIZATION_FAILURE


def test_generalization_failure_first_epoch_over_two():
    train = [1.0, 0.8, 0.6, 0.5, 0.45, 0.3]
    val = [1.0, 0.9, 0.95, 0.97, 0.99, 1.0]
    # best val 0.9: ratios 1.0, 1.125, 1.5, 1.8, 2.0 (not >), 3.0
    assert replay(train, val) == (5, GENERALIZATION_FAILURE)


def test_stopping_precedence():
    mon = StopMonitor(best_val_loss=1.0, epochs_since_improvement=20)
    assert check_stopping(mon, rep(1e-6), rep(1e-6)) == ADEQUATE_PERFORMANCE
    mon = StopMonitor(best_val_loss=1.0, best_train_loss=0.1, epochs_since_improvement=20)
    assert check_stopping(mon, rep(0.2), rep(1.0)) == GENERALIZATION_FAILURE


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0)), min_size=1,
                max_size=60))
def test_stopping_replay_is_pure(seq):
    train, val = zip(*seq)
    assert replay(train, val) == replay(train, val)


def test_monitor_validation():
    with pytest.raises(ConfigError):
        StopMonitor(patience=0)


# --- epochs and schedule -----------------------------------------------------


def test_full_batch_epoch_is_one_step(tiny_corpus):
    p = gentle_params()
    cfg = TrainConfig(batch_size=len(tiny_corpus.train))
    mask = make_mask("s_only_dense", 64)
    _, a, _ = run_epoch(p, AdamState.fresh(p), tiny_corpus.train, cfg, mask, tiny_corpus.cfg)
    assert a.t == 1


def test_zero_learning_rate_epoch(tiny_corpus):
    p = gentle_params()
    cfg = TrainConfig(batch_size=3, learning_rate=0.0)
    mask = make_mask("s_only_dense", 64)
    q, a, report = run_epoch(p, AdamState.fresh(p), tiny_corpus.train, cfg, mask,
                             tiny_corpus.cfg)
    assert q == p and a.t == 3
    assert report.total == pytest.approx(batch_loss(p, tiny_corpus.train, mask,
                                                    tiny_corpus.cfg).total, rel=1e-12)


def test_epoch_rejects_oversized_batch(tiny_corpus):
    p = gentle_params()
    with pytest.raises(ContractError):
        run_epoch(p, AdamState.fresh(p), tiny_corpus.train, TrainConfig(batch_size=9),
                  make_mask("s_only_dense", 64), tiny_corpus.cfg)


def _history_rows(hist):
    return [(r.stage, r.epoch, r.train, r.val) for r in hist.records]


def test_training_bit_reproducible(tiny_corpus, tmp_path):
    cfg = TrainConfig(batch_size=3, epochs_max=4, learning_rate=1e-3)
    init = InitSpec(w2=GroupInit("normal", 0.01), seed=1)
    p1, h1 = train_two_stage(tiny_corpus, cfg, init, hidden=8)
    p2, h2 = train_two_stage(tiny_corpus, cfg, init, hidden=8)
    assert p1 == p2 and _history_rows(h1) == _history_rows(h2)
    h1.write_csv(tmp_path / "a.csv")
    h2.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_self_generated_corpus_stops_adequate_in_first_epoch(tiny_corpus):
    p = gentle_params(seed=3)
    own = self_generated(tiny_corpus, p)
    _, hist = train_two_stage(own, TrainConfig(batch_size=4), p)
    assert hist.terminations == {1: ADEQUATE_PERFORMANCE, 2: ADEQUATE_PERFORMANCE}
    assert [r.epoch for r in hist.records] == [0, 0]


def test_stage_two_uses_full_resolution(tiny_corpus):
    cfg = TrainConfig(batch_size=4, epochs_max=2)
    _, hist = train_two_stage(tiny_corpus, cfg, gentle_params())
    s1 = hist.stage_records(1)
    s2 = hist.stage_records(2)
    assert s1[0].val.n_observed_steps == 8 and s2[0].val.n_observed_steps == 64


def test_stage2_only_schedule(tiny_corpus):
    cfg = TrainConfig(batch_size=4, epochs_max=2, two_stage=False)
    _, hist = train_two_stage(tiny_corpus, cfg, gentle_params())
    assert set(hist.terminations) == {2}


def test_coarsen_factor_must_divide(tiny_corpus):
    with pytest.raises(ContractError):
        train_two_stage(tiny_corpus, TrainConfig(stage1_coarsen_factor=7, batch_size=2),
                        gentle_params())


def test_blowup_aborts_with_partial_history(tiny_corpus):
    wild = MlpParams([[40.0, 40.0]], [10.0], [500.0], 10.0)
    with pytest.raises(TrainingAborted) as info:
        train_two_stage(tiny_corpus, TrainConfig(batch_size=4), wild)
    assert info.value.history.terminations == {1: BLOWUP_ABORT}
    assert info.value.sample is not None


def test_termination_lines():
    h = TrainHistory()
    h.terminations[1] = IMPROVEMENT_FAILURE
    assert h.termination_lines() == ["stage=1 reason=improvement_failure epochs=0"]


# --- evaluation ---------------------------------------------------------------


def test_evaluate_self_generated_is_zero(tiny_corpus):
    p = gentle_params(seed=2)
    own = self_generated(tiny_corpus, p)
    assert evaluate(p, own.test, own.cfg).loss_ratio == 0.0


@pytest.mark.parametrize("mode", ["s_only_dense", "xs_every_8th", "xs_dense"])
def test_evaluate_ignores_mask(tiny_corpus, mode):
    p = gentle_params(seed=2)
    a = evaluate(p, tiny_corpus.test, tiny_corpus.cfg, mode)
    b = evaluate(p, tiny_corpus.test, tiny_corpus.cfg)
    assert a == b and a.n_observed_steps == 64


def test_per_sample_ratios_aggregate(tiny_corpus):
    p = gentle_params(seed=2)
    ratios = evaluate_per_sample(p, tiny_corpus.test, tiny_corpus.cfg)
    total = evaluate(p, tiny_corpus.test, tiny_corpus.cfg)
    assert ratios.mean() == pytest.approx(total.loss_ratio, rel=1e-12)


def test_mu_error_exact_encoding():
    cfg = BioreactorConfig()
    s1, s2 = 0.05, 0.2
    m1, m2 = haldane_mu(s1, cfg), haldane_mu(s2, cfg)
    slope = (m2 - m1) / (s2 - s1)
    p = MlpParams([[0.0, 1.0]], [0.0], [slope], m1 - slope * s1)
    region = Region(np.repeat([0.1, 0.5, 2.0], 2), np.tile([s1, s2], 3))
    assert mu_surface_error(p, cfg, region) <= 1e-15


def test_mu_error_zero_network():
    cfg = BioreactorConfig()
    zero = MlpParams(np.zeros((2, 2)), np.zeros(2), np.zeros(2), 0.0)
    S = np.linspace(0.01, 1.0, 50)
    region = Region(np.ones(50), S)
    assert mu_surface_error(zero, cfg, region) == pytest.approx(
        np.sqrt(np.mean(haldane_mu(S, cfg) ** 2)), rel=1e-14)


def test_mu_error_empty_region():
    with pytest.raises(ContractError):
        mu_surface_error(gentle_params(), BioreactorConfig(), Region([], []))


def test_visited_region_is_subset_of_bounding_box(tiny_corpus):
    region = visited_region(tiny_corpus.test, resolution=32)
    X = tiny_corpus.test.truth[:, :, 0]
    S = tiny_corpus.test.truth[:, :, 1]
    assert 0 < len(region) <= 32 * 32
    assert region.X.min() >= X.min() and region.X.max() <= X.max()
    assert region.S.min() >= S.min() and region.S.max() <= S.max()


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(mask_mode="nope")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
