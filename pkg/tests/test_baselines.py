import numpy as np
import pytest

from gla_icl import kernels
from gla_icl.adaptive_baselines import _stream_chunk, lms_track, rls_track, tail_window
from gla_icl.task_gen import ConfigError, TaskConfig, weight_cross_covariance

STATIONARY = TaskConfig(d=4, n=1, gamma=1.0, sigma_w2=1.0, sigma_e2=0.0)


def test_tail_window_is_last_fifth():
    assert tail_window(1000) == 200
    assert tail_window(3) == 1


def test_lms_converges_on_fixed_weights():
    res = lms_track(STATIONARY, 0.05, 300, 200, 0)
    assert res.per_step_sq_error[-1] < 0.01 * res.per_step_sq_error[0]
    assert res.steady_state_mean < res.per_step_sq_error[0]
    assert res.diverged_count == 0 and res.trials == 200


def test_rls_growing_window_converges():
    res = rls_track(STATIONARY, 1.0, 200, 200, 1)
    assert res.per_step_sq_error[-1] < 1e-3 * res.per_step_sq_error[0]
    assert res.reinit_count == 0


def test_zero_step_tracks_label_moment():
    cfg = TaskConfig(d=5, n=1, gamma=0.9, sigma_w2=1.0, sigma_e2=0.1)
    res = lms_track(cfg, 0.0, 200, 2000, 2)
    # without adaptation the error is the label second moment, d * c(t, t)
    stationary = cfg.d * cfg.sigma_e2 / (1 - cfg.gamma ** 2)
    assert abs(res.steady_state_mean - stationary) < 4 * res.stderr
    assert res.per_step_sq_error[0] == pytest.approx(cfg.d * weight_cross_covariance(cfg, 1, 1), rel=0.1)


def test_results_are_reproducible_and_nonnegative():
    cfg = TaskConfig(d=3, n=1, gamma=0.9)
    a = rls_track(cfg, 0.95, 50, 30, 4, chunk=7)
    b = rls_track(cfg, 0.95, 50, 30, 4, chunk=7)
    assert np.array_equal(a.per_step_sq_error, b.per_step_sq_error)
    assert np.all(a.per_step_sq_error >= 0)
    assert a.steady_state_mean == pytest.approx(a.per_step_sq_error[-10:].mean())
    assert a.all_step_mean == pytest.approx(a.per_step_sq_error.mean())


def test_divergent_trials_are_excluded_and_counted():
    cfg = TaskConfig(d=10, n=1, gamma=0.95)
    res = lms_track(cfg, 0.5, 200, 20, 0)
    assert res.diverged_count == 20
    assert res.trials == 0 and np.isnan(res.steady_state_mean)


def test_argument_validation():
    cfg = TaskConfig(d=2, n=1, gamma=0.9)
    with pytest.raises(ConfigError):
        lms_track(cfg, -0.1, 10, 5, 0)
    with pytest.raises(ConfigError):
        rls_track(cfg, 0.0, 10, 5, 0)
    with pytest.raises(ConfigError):
        rls_track(cfg, 1.1, 10, 5, 0)
    with pytest.raises(ConfigError):
        rls_track(cfg, 0.9, 10, 5, 0, delta=0.0)
    with pytest.raises(ConfigError):
        lms_track(cfg, 0.1, 0, 5, 0)


def test_causality():
    cfg = TaskConfig(d=3, n=1, gamma=0.9)
    short = lms_track(cfg, 0.02, 40, 50, 9)
    # errors up to step t must not depend on data after t
    w0, innov, x = _stream_chunk(cfg, 50, 40, 9, 0)
    full, _ = kernels.lms_sq_errors(w0, innov, x, cfg.gamma, 0.02)
    prefix, _ = kernels.lms_sq_errors(w0, innov[:, :25].copy(), x[:, :25].copy(), cfg.gamma, 0.02)
    np.testing.assert_array_equal(full[:, :25], prefix)
    np.testing.assert_allclose(short.per_step_sq_error, full.mean(axis=0))
