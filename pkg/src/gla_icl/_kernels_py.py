"""numpy fallback for the compiled recurrences; same signatures and update order."""

from __future__ import annotations

import numpy as np

DIVERGE = 1e6


def gla_scan(values, keys, queries, lam):
    values = np.asarray(values, dtype=float)
    keys = np.asarray(keys, dtype=float)
    queries = np.asarray(queries, dtype=float)
    nb, nt, dv = values.shape
    state = np.zeros((nb, dv, keys.shape[2]))
    out = np.empty((nb, nt, dv))
    for t in range(nt):
        state = lam * state + values[:, t, :, None] * keys[:, t, None, :]
        out[:, t] = np.einsum("bij,bj->bi", state, queries[:, t])
    return out


def _track(w0, innov, x, gamma, update):
    nk, nt, _ = x.shape
    err = np.full((nk, nt), np.nan)
    alive = np.ones(nk, dtype=bool)
    w = np.array(w0, dtype=float)
    wh = np.zeros_like(w)
    for t in range(nt):
        w = gamma * w + innov[:, t]
        xt = x[:, t]
        e = np.einsum("kj,kj->k", w - wh, xt)
        with np.errstate(invalid="ignore"):
            alive &= np.isfinite(e) & (np.abs(e) <= DIVERGE)
        err[alive, t] = e[alive] ** 2
        e = np.where(alive, e, 0.0)
        wh = update(wh, e, xt, alive)
    return err, ~alive


def lms_sq_errors(w0, innov, x, gamma, mu):
    def update(wh, e, xt, alive):
        return wh + mu * e[:, None] * xt

    return _track(w0, innov, x, gamma, update)


def rls_sq_errors(w0, innov, x, gamma, forgetting, delta):
    nk, _, d = x.shape
    eye = np.eye(d) / delta
    p = np.tile(eye, (nk, 1, 1))
    reinit = np.zeros(nk, dtype=np.int64)

    def update(wh, e, xt, alive):
        nonlocal p
        px = np.einsum("kij,kj->ki", p, xt)
        denom = np.einsum("ki,ki->k", xt, px)
        bad = alive & ~(np.isfinite(denom) & (denom > 0))
        if bad.any():
            reinit[bad] += 1
            p[bad] = eye
            px[bad] = xt[bad] / delta
            denom[bad] = np.einsum("ki,ki->k", xt[bad], px[bad])
        gain = px / (denom + forgetting)[:, None]
        p = (p - gain[:, :, None] * px[:, None, :]) / forgetting
        p = 0.5 * (p + np.swapaxes(p, 1, 2))
        return wh + gain * e[:, None]

    err, diverged = _track(w0, innov, x, gamma, update)
    return err, diverged, reinit
