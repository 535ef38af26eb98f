# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled sequential recurrences: the gated state scan and LMS/RLS tracking loops."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isfinite

cnp.import_array()

cdef double DIVERGE = 1e6


def gla_scan(double[:, :, ::1] values, double[:, :, ::1] keys, double[:, :, ::1] queries, double lam):
    """Outputs ``o_t = S_t q_t`` with ``S_t = lam S_{t-1} + v_t k_t^T`` for each batch row."""
    cdef Py_ssize_t nb = values.shape[0], nt = values.shape[1]
    cdef Py_ssize_t dv = values.shape[2], dk = keys.shape[2]
    cdef Py_ssize_t b, t, i, j
    cdef double acc
    out_arr = np.zeros((nb, nt, dv))
    state_arr = np.zeros((dv, dk))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] s = state_arr
    for b in range(nb):
        s[:, :] = 0.0
        for t in range(nt):
            for i in range(dv):
                acc = 0.0
                for j in range(dk):
                    s[i, j] = lam * s[i, j] + values[b, t, i] * keys[b, t, j]
                    acc += s[i, j] * queries[b, t, j]
                out[b, t, i] = acc
    return out_arr


def lms_sq_errors(double[:, ::1] w0, double[:, :, ::1] innov, double[:, :, ::1] x,
                  double gamma, double mu):
    """A-priori squared errors of LMS tracking ``w_t = gamma w_{t-1} + innov_t``.

    Returns ``(errors (K, T), diverged (K,))``. A diverged trial stops at the first
    step whose error magnitude exceeds 1e6; its remaining entries are NaN.
    """
    cdef Py_ssize_t nk = x.shape[0], nt = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t k, t, j
    cdef double y, yhat, e
    err_arr = np.full((nk, nt), np.nan)
    div_arr = np.zeros(nk, dtype=np.uint8)
    cdef double[:, ::1] err = err_arr
    cdef unsigned char[::1] div = div_arr
    w_arr = np.empty(d)
    wh_arr = np.empty(d)
    cdef double[::1] w = w_arr
    cdef double[::1] wh = wh_arr
    for k in range(nk):
        for j in range(d):
            w[j] = w0[k, j]
            wh[j] = 0.0
        for t in range(nt):
            y = 0.0
            yhat = 0.0
            for j in range(d):
                w[j] = gamma * w[j] + innov[k, t, j]
                y += w[j] * x[k, t, j]
                yhat += wh[j] * x[k, t, j]
            e = y - yhat
            if not isfinite(e) or fabs(e) > DIVERGE:
                div[k] = 1
                break
            err[k, t] = e * e
            for j in range(d):
                wh[j] += mu * e * x[k, t, j]
    return err_arr, div_arr.astype(bool)


def rls_sq_errors(double[:, ::1] w0, double[:, :, ::1] innov, double[:, :, ::1] x,
                  double gamma, double forgetting, double delta):
    """A-priori squared errors of exponentially weighted RLS.

    The inverse correlation starts at ``I / delta`` and is reset to that value
    whenever it stops being positive definite along the current input. Returns
    ``(errors (K, T), diverged (K,), reinit (K,))``.
    """
    cdef Py_ssize_t nk = x.shape[0], nt = x.shape[1], d = x.shape[2]
    cdef Py_ssize_t k, t, i, j
    cdef double y, yhat, e, acc, denom, inv_f = 1.0 / forgetting, inv_delta = 1.0 / delta
    err_arr = np.full((nk, nt), np.nan)
    div_arr = np.zeros(nk, dtype=np.uint8)
    reinit_arr = np.zeros(nk, dtype=np.int64)
    cdef double[:, ::1] err = err_arr
    cdef unsigned char[::1] div = div_arr
    cdef long long[::1] reinit = reinit_arr
    w_arr = np.empty(d)
    wh_arr = np.empty(d)
    px_arr = np.empty(d)
    gain_arr = np.empty(d)
    p_arr = np.empty((d, d))
    cdef double[::1] w = w_arr
    cdef double[::1] wh = wh_arr
    cdef double[::1] px = px_arr
    cdef double[::1] gain = gain_arr
    cdef double[:, ::1] p = p_arr
    for k in range(nk):
        for i in range(d):
            w[i] = w0[k, i]
            wh[i] = 0.0
            for j in range(d):
                p[i, j] = inv_delta if i == j else 0.0
        for t in range(nt):
            y = 0.0
            yhat = 0.0
            for j in range(d):
                w[j] = gamma * w[j] + innov[k, t, j]
                y += w[j] * x[k, t, j]
                yhat += wh[j] * x[k, t, j]
            e = y - yhat
            if not isfinite(e) or fabs(e) > DIVERGE:
                div[k] = 1
                break
            err[k, t] = e * e
            denom = 0.0
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += p[i, j] * x[k, t, j]
                px[i] = acc
                denom += x[k, t, i] * acc
            if not (denom > 0.0) or not isfinite(denom):
                reinit[k] += 1
                denom = 0.0
                for i in range(d):
                    for j in range(d):
                        p[i, j] = inv_delta if i == j else 0.0
                    px[i] = inv_delta * x[k, t, i]
                    denom += x[k, t, i] * px[i]
            denom += forgetting
            for i in range(d):
                gain[i] = px[i] / denom
                wh[i] += gain[i] * e
            for i in range(d):
                for j in range(i, d):
                    acc = (p[i, j] - gain[i] * px[j]) * inv_f
                    p[i, j] = acc
                    p[j, i] = acc
    return err_arr, div_arr.astype(bool), reinit_arr
