import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gla_icl import _kernels_py, kernels
from gla_icl.task_gen import keyed_rng

compiled = pytest.importorskip("gla_icl._kernels")


def _stream(k=6, t=40, d=3, seed=0):
    rng = keyed_rng(seed)
    return rng.standard_normal((k, d)), 0.1 * rng.standard_normal((k, t, d)), rng.standard_normal((k, t, d))


def test_backend_reported():
    assert kernels.BACKEND in ("compiled", "python")


@settings(max_examples=25, deadline=None)
@given(lam=st.floats(0.05, 1.0), b=st.integers(1, 4), t=st.integers(1, 12), dv=st.integers(1, 4),
       dk=st.integers(1, 4), seed=st.integers(0, 1000))
def test_scan_backends_agree(lam, b, t, dv, dk, seed):
    rng = keyed_rng(seed)
    v, k, q = rng.standard_normal((b, t, dv)), rng.standard_normal((b, t, dk)), rng.standard_normal((b, t, dk))
    np.testing.assert_allclose(compiled.gla_scan(v, k, q, lam), _kernels_py.gla_scan(v, k, q, lam),
                               rtol=1e-12, atol=1e-12)


def test_scan_matches_unrolled_sum():
    rng = keyed_rng(3)
    v, k, q = rng.standard_normal((1, 5, 2)), rng.standard_normal((1, 5, 3)), rng.standard_normal((1, 5, 3))
    lam = 0.7
    out = kernels.gla_scan(v, k, q, lam)[0]
    for i in range(5):
        state = sum(lam ** (i - j) * np.outer(v[0, j], k[0, j]) for j in range(i + 1))
        np.testing.assert_allclose(out[i], state @ q[0, i], rtol=1e-12)


@pytest.mark.parametrize("mu", [0.0, 0.01, 0.2])
def test_lms_backends_agree(mu):
    w0, innov, x = _stream()
    e1, b1 = compiled.lms_sq_errors(w0, innov, x, 0.9, mu)
    e2, b2 = _kernels_py.lms_sq_errors(w0, innov, x, 0.9, mu)
    np.testing.assert_allclose(e1, e2, rtol=1e-10, atol=1e-12)
    assert np.array_equal(np.asarray(b1, dtype=bool), b2)


def test_lms_matches_hand_loop():
    w0, innov, x = _stream(k=1, t=15)
    mu, gamma = 0.05, 0.8
    w, wh, errs = w0[0].copy(), np.zeros(3), []
    for t in range(15):
        w = gamma * w + innov[0, t]
        e = w @ x[0, t] - wh @ x[0, t]
        errs.append(e * e)
        wh = wh + mu * e * x[0, t]
    err, _ = kernels.lms_sq_errors(w0, innov, x, gamma, mu)
    np.testing.assert_allclose(err[0], errs, rtol=1e-12)


def test_lms_divergence_flagged():
    w0, innov, x = _stream(k=3, t=200)
    err, bad = kernels.lms_sq_errors(w0, innov, 5 * x, 0.99, 2.0)
    bad = np.asarray(bad, dtype=bool)
    assert bad.all()
    assert np.isnan(err[:, -1]).all()


@pytest.mark.parametrize("forgetting,delta", [(0.98, 1e-2), (1.0, 1e-1), (0.9, 1e-3)])
def test_rls_backends_agree(forgetting, delta):
    w0, innov, x = _stream(t=80)
    e1, b1, r1 = compiled.rls_sq_errors(w0, innov, x, 0.95, forgetting, delta)
    e2, b2, r2 = _kernels_py.rls_sq_errors(w0, innov, x, 0.95, forgetting, delta)
    np.testing.assert_allclose(e1, e2, rtol=1e-8, atol=1e-10)
    assert np.array_equal(np.asarray(r1), np.asarray(r2))


def test_rls_matches_textbook_recursion():
    w0, innov, x = _stream(k=1, t=20)
    gamma, lam, delta = 0.9, 0.97, 0.05
    p = np.eye(3) / delta
    w, wh, errs = w0[0].copy(), np.zeros(3), []
    for t in range(20):
        w = gamma * w + innov[0, t]
        xt = x[0, t]
        e = w @ xt - wh @ xt
        errs.append(e * e)
        g = p @ xt / (lam + xt @ p @ xt)
        wh = wh + g * e
        p = (p - np.outer(g, xt @ p)) / lam
    err, _, _ = kernels.rls_sq_errors(w0, innov, x, gamma, lam, delta)
    np.testing.assert_allclose(err[0], errs, rtol=1e-9)
