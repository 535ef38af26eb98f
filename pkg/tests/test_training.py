import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gla_icl.constants import NumericalError, constant_set
from gla_icl.gla_core import GlaParams, ReducedParams
from gla_icl.task_gen import ConfigError, TaskConfig, keyed_rng, sample_batch
from gla_icl.theory import (InitConfig, closed_form_optimum, optimal_product, pl_constant, positivity_floor,
                            sigma_bound)
from gla_icl.training import (SgdConfig, default_step, effective_product, geometric_decay_ratio,
                              gradient_flow, init_from_assumption, loss_and_grad, mc_error_params,
                              mc_error_stack, sgd_train, sgd_train_stack)


def _small(seed=0, d=3, n=10):
    rng = keyed_rng(seed, 31)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    cov = (q * rng.uniform(0.5, 2.0, d)) @ q.T
    cfg = TaskConfig(d=d, n=n, gamma=float(rng.uniform(0.5, 0.99)), sigma_e2=0.05, lambda_cov=cov)
    return constant_set(cfg, float(rng.uniform(0.5, 1.0))), rng


def test_gradient_flow_reaches_optimum_with_invariants():
    cs, rng = _small(1)
    init = InitConfig.normalized(0.5 * sigma_bound(cs), rng.standard_normal((3, 3)))
    alpha = pl_constant(cs, init)
    traj = gradient_flow(init_from_assumption(init, cs), cs, 80.0 / alpha, record_every=20)
    target = np.linalg.norm(optimal_product(cs))
    assert traj.residuals[-1] <= 1e-8 * target
    assert np.abs(traj.balancedness_residuals).max() <= 1e-8
    bound = np.exp(-alpha * traj.times) * traj.loss_gaps[0]
    assert np.all(traj.loss_gaps <= bound * (1 + 1e-9) + 1e-15)
    assert np.all(np.diff(traj.loss_gaps) <= 1e-15)
    floor = positivity_floor(cs, init)
    assert min(s.u_neg1 for s in traj.states) >= floor
    np.testing.assert_allclose(traj.final.product(), closed_form_optimum(cs).product(), rtol=1e-7)


def test_gradient_flow_halves_an_unstable_step():
    cs, _ = _small(2)
    init = init_from_assumption(InitConfig.normalized(0.5 * sigma_bound(cs), np.eye(3)), cs)
    h = default_step(cs, init)
    traj = gradient_flow(init, cs, 2000 * h, step=200 * h, record_every=50)
    assert traj.step < 200 * h
    assert np.isfinite(traj.loss_gaps).all()


def test_gradient_flow_rejects_bad_arguments():
    cs, _ = _small(3)
    init = init_from_assumption(InitConfig.normalized(0.1, np.eye(3)), cs)
    with pytest.raises(ConfigError):
        gradient_flow(init, cs, 0.0)
    with pytest.raises(ConfigError):
        gradient_flow(init, cs, 1.0, step=-1.0)
    with pytest.raises(ConfigError):
        gradient_flow(ReducedParams(np.eye(2), 1.0), cs, 1.0)


def test_sgd_config_validation_and_schedule():
    with pytest.raises(ConfigError):
        SgdConfig(batch_size=0)
    with pytest.raises(ConfigError):
        SgdConfig(step_size=-0.1)
    with pytest.raises(ConfigError):
        SgdConfig(optimizer_kind="sign")
    with pytest.raises(ConfigError):
        SgdConfig(moment_decays=(1.0, 0.9))
    opt = SgdConfig(step_size=0.1, steps=11, decay_to=0.01)
    assert opt.lr(0) == pytest.approx(0.1)
    assert opt.lr(10) == pytest.approx(0.001)
    assert opt.lr(5) == pytest.approx(0.01)


@pytest.mark.parametrize("kind", ["plain-gd", "adaptive-moment"])
def test_zero_step_size_leaves_parameters(kind):
    cfg = TaskConfig(d=2, n=5, gamma=0.9)
    p0 = GlaParams.gaussian(2, 0.8, keyed_rng(0), 0.5)
    res = sgd_train(p0, cfg, 0.8, SgdConfig(batch_size=20, step_size=0.0, steps=3, optimizer_kind=kind))
    assert np.array_equal(res.params.w_v, p0.w_v) and np.array_equal(res.params.w_kq, p0.w_kq)


def test_lambda_mismatch_rejected():
    cfg = TaskConfig(d=2, n=5, gamma=0.9)
    with pytest.raises(ConfigError):
        sgd_train(GlaParams.zeros(2, 0.5), cfg, 0.8, SgdConfig(steps=1, batch_size=2))


def _fd_grad(loss_fn, tensors, h=1e-6):
    out = []
    for idx, t in enumerate(tensors):
        g = np.zeros_like(t)
        for pos in np.ndindex(t.shape):
            bumped = [x.copy() for x in tensors]
            bumped[idx][pos] += h
            up = loss_fn(bumped)
            bumped[idx][pos] -= 2 * h
            g[pos] = (up - loss_fn(bumped)) / (2 * h)
        out.append(g)
    return out


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_full_gradient_matches_finite_differences(seed):
    cfg = TaskConfig(d=2, n=6, gamma=0.9, sigma_e2=0.1)
    batch = sample_batch(cfg, 16, seed)
    p = GlaParams.gaussian(2, 0.7, keyed_rng(seed, 1), 0.8)
    _, grads, _ = loss_and_grad(p, batch)
    fd = _fd_grad(lambda ts: loss_and_grad(GlaParams(ts[0], ts[1], 0.7), batch)[0], [p.w_v, p.w_kq])
    for g, f in zip(grads, fd):
        assert np.linalg.norm(g - f) <= 1e-5 * max(1.0, np.linalg.norm(f))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_reduced_gradient_matches_finite_differences(seed):
    cfg = TaskConfig(d=3, n=6, gamma=0.9, sigma_e2=0.1)
    batch = sample_batch(cfg, 16, seed)
    rng = keyed_rng(seed, 2)
    rp = ReducedParams(rng.standard_normal((3, 3)), float(rng.standard_normal()))
    _, grads, even = loss_and_grad(rp, batch, 0.7)
    assert even == 0.0
    fd = _fd_grad(lambda ts: loss_and_grad(ReducedParams(ts[0], float(ts[1])), batch, 0.7)[0],
                  [rp.u11, np.array(rp.u_neg1)])
    for g, f in zip(grads, fd):
        assert np.linalg.norm(g - f) <= 1e-5 * max(1.0, np.linalg.norm(f))


def test_reduced_gradient_needs_lambda():
    batch = sample_batch(TaskConfig(d=2, n=3, gamma=0.9), 4, 0)
    with pytest.raises(ConfigError):
        loss_and_grad(ReducedParams(np.eye(2), 1.0), batch)


def test_effective_product_of_embedded_params():
    rng = keyed_rng(4)
    w_v, w_kq = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    p = GlaParams(w_v, w_kq, 0.5)
    expected = w_v[3, 3] * w_kq[:3, :3] + np.outer(w_v[3, :3], w_kq[3, :3])
    np.testing.assert_allclose(effective_product(p), expected)


def test_sgd_reduced_converges_toward_optimum():
    cfg = TaskConfig(d=2, n=10, gamma=0.9, sigma_e2=0.05)
    cs = constant_set(cfg, 0.8)
    init = init_from_assumption(InitConfig.normalized(0.3 * sigma_bound(cs), np.eye(2)), cs)
    opt = SgdConfig(batch_size=2000, step_size=0.02, steps=300, optimizer_kind="adaptive-moment", decay_to=0.05)
    res = sgd_train(init, cfg, 0.8, opt, cs)
    gaps = res.trajectory.loss_gaps
    assert gaps[-1] < 0.05 * gaps[0]
    assert res.trajectory.residuals[-1] < 0.1 * np.linalg.norm(optimal_product(cs))


def test_sgd_is_reproducible_and_stoppable():
    cfg = TaskConfig(d=2, n=5, gamma=0.9)
    p0 = GlaParams.gaussian(2, 0.8, keyed_rng(0), 0.5)
    opt = SgdConfig(batch_size=50, step_size=0.01, steps=6, optimizer_kind="adaptive-moment")
    a = sgd_train(p0, cfg, 0.8, opt)
    b = sgd_train(p0, cfg, 0.8, opt)
    assert np.array_equal(a.batch_losses, b.batch_losses)
    c = sgd_train(p0, cfg, 0.8, opt, stop=lambda k, params: k == 2)
    assert len(c.batch_losses) == 3
    assert np.array_equal(c.batch_losses, a.batch_losses[:3])


def test_sgd_raises_on_divergence():
    cfg = TaskConfig(d=2, n=20, gamma=0.9)
    p0 = GlaParams.gaussian(2, 1.0, keyed_rng(0), 3.0)
    with pytest.raises(NumericalError):
        sgd_train(p0, cfg, 1.0, SgdConfig(batch_size=50, step_size=50.0, steps=200))


def test_geometric_decay_ratio():
    gaps = 0.99 ** np.arange(500)
    assert geometric_decay_ratio(gaps) == pytest.approx(0.99 ** 50, rel=1e-9)
    assert math.isnan(geometric_decay_ratio(gaps[:40]))
    assert geometric_decay_ratio(np.ones(300)) == pytest.approx(1.0)


def test_stack_training_lowers_loss():
    cfg = TaskConfig(d=2, n=8, gamma=0.9)
    rng = keyed_rng(5)
    layers = [GlaParams.gaussian(2, 0.8, rng, 0.3) for _ in range(2)]
    opt = SgdConfig(batch_size=200, step_size=0.01, steps=60, optimizer_kind="adaptive-moment")
    res = sgd_train_stack(layers, cfg, opt)
    assert res.batch_losses[-10:].mean() < res.batch_losses[:5].mean()
    one, _ = mc_error_stack(res.layers[:1], cfg, 2000, 3)
    both, _ = mc_error_stack(res.layers, cfg, 2000, 3)
    assert np.isfinite(one) and np.isfinite(both)


def test_mc_error_params_reproducible():
    cfg = TaskConfig(d=2, n=5, gamma=0.9)
    p = GlaParams.gaussian(2, 0.8, keyed_rng(1), 0.5)
    assert mc_error_params(p, cfg, 500, 7) == mc_error_params(p, cfg, 500, 7)
    with pytest.raises(ConfigError):
        mc_error_params(p, cfg, 1, 7)
