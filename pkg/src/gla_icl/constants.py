"""Closed-form moment constants D1..D4 and the effective covariance.

Every constant is a weighted sum of AR(1) cross-covariances ``c(a, b)``:

    D1 = sum_{i=1}^{n}       lam^{n+1-i}     c(n+1, i)
    D2 = sum_{a=1}^{n}       lam^{2n+2-2a}   c(a, a)
    D3 = 2 sum_{1<=b<a<=n}   lam^{2n+2-a-b}  c(a, b)
    D4 = c(n+1, n+1)

The ``*_direct`` functions evaluate those sums term by term and serve as the
reference. The ``*_closed`` functions use geometric-series forms with one
branch per singular locus of the generic expression. Close to (but not on) a
locus those forms lose digits to cancellation, so there the same sums are
rewritten as complete homogeneous polynomials in positive nodes, e.g.

    D1 = sw2 lam g^3 h_{n-1}(lam g, g^2) + se2 lam g h_{n-1}(lam g, g^2, 1)

and evaluated without any subtraction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .task_gen import TaskConfig, cross_covariance_table

log = logging.getLogger(__name__)

BRANCH_TOL = 1e-9
# explicit branch formulas cancel within this distance of a locus they do not cover
GUARD = 2e-2
DIRECT_MAX_N = 256
_LOG_POW_EXP = 1000


class NumericalError(ArithmeticError):
    """Raised when a matrix that must be positive definite is not."""


def _pow(base: float, k: float) -> float:
    if base < 1.0 and k > _LOG_POW_EXP and base > 0.0:
        return math.exp(k * math.log(base))
    return base ** k


def _locus_distances(lam: float, gamma: float) -> tuple[float, ...]:
    return abs(lam - 1.0), abs(gamma - 1.0), abs(lam - gamma), abs(lam * gamma - 1.0)


def well_separated(lam: float, gamma: float) -> bool:
    """True when each locus is either hit exactly (within tolerance) or at least ``GUARD`` away."""
    return all(x < BRANCH_TOL or x >= GUARD for x in _locus_distances(lam, gamma))


def branch(lam: float, gamma: float) -> str:
    """Name of the closed-form branch for ``(lam, gamma)``; loci tested in a fixed order."""
    lam_one = abs(lam - 1.0) < BRANCH_TOL
    gamma_one = abs(gamma - 1.0) < BRANCH_TOL
    if lam_one and gamma_one:
        return "lam=gamma=1"
    if gamma_one:
        return "gamma=1"
    if lam_one:
        return "lam=1"
    if abs(lam - gamma) < BRANCH_TOL:
        return "lam=gamma"
    if abs(lam * gamma - 1.0) < BRANCH_TOL:
        return "lam=1/gamma"
    return "generic"


# geometric building blocks; each has an explicit singular branch


def _geo(r: float, n: int, unit: bool) -> float:
    """sum_{j=1}^{n} r^j"""
    if n <= 0:
        return 0.0
    if unit:
        return float(n)
    return r * (1.0 - _pow(r, n)) / (1.0 - r)


def _ageo(r: float, n: int, unit: bool) -> float:
    """sum_{j=1}^{n} j r^j"""
    if n <= 0:
        return 0.0
    if unit:
        return n * (n + 1) / 2.0
    return r * (1.0 - (n + 1) * _pow(r, n) + n * _pow(r, n + 1)) / (1.0 - r) ** 2


def _mix(a: float, b: float, n: int, equal: bool) -> float:
    """sum_{j=1}^{n} a^j b^{n-j}"""
    if n <= 0:
        return 0.0
    if equal:
        return n * _pow(a, n)
    return a * (_pow(a, n) - _pow(b, n)) / (a - b)


def _split(cfg: TaskConfig) -> tuple[float, float]:
    """For gamma != 1, c(a, b) = A g^{a+b} + B g^{|a-b|}; returns (A, B)."""
    b = cfg.sigma_e2 / (1.0 - cfg.gamma ** 2)
    return cfg.sigma_w2 - b, b


def _d1_explicit(cfg: TaskConfig, lam: float) -> float:
    n, g = cfg.n, cfg.gamma
    br = branch(lam, g)
    if br in ("lam=gamma=1", "gamma=1"):
        unit = br == "lam=gamma=1"
        # c(n+1, n+1-j) = sw2 + (n+1-j) se2
        geo = _geo(lam, n, unit)
        return cfg.sigma_w2 * geo + cfg.sigma_e2 * ((n + 1) * geo - _ageo(lam, n, unit))
    A, B = _split(cfg)
    # sum_j lam^j g^{2n+2-j} = g^{n+2} * mix(lam, g, n)
    shared = g ** (n + 2) * _mix(lam, g, n, br == "lam=gamma")
    return A * shared + B * _geo(lam * g, n, br == "lam=1/gamma")


def _d2_explicit(cfg: TaskConfig, lam: float) -> float:
    n, g = cfg.n, cfg.gamma
    br = branch(lam, g)
    lam2 = lam * lam
    if br in ("lam=gamma=1", "gamma=1"):
        unit = br == "lam=gamma=1"
        geo = _geo(lam2, n, unit)
        return cfg.sigma_w2 * geo + cfg.sigma_e2 * ((n + 1) * geo - _ageo(lam2, n, unit))
    A, B = _split(cfg)
    # sum_j lam^{2j} g^{2(n+1-j)} = g^2 mix(lam^2, g^2, n)
    shared = g * g * _mix(lam2, g * g, n, br == "lam=gamma")
    return A * shared + B * _geo(lam2, n, br == "lam=1")


def _d3_explicit(cfg: TaskConfig, lam: float) -> float:
    n, g = cfg.n, cfg.gamma
    if n < 2:
        return 0.0
    br = branch(lam, g)
    lam2 = lam * lam
    lam_one = br in ("lam=gamma=1", "lam=1")
    if br in ("lam=gamma=1", "gamma=1"):
        # with p = n+1-a < q = n+1-b: c(a, b) = sw2 + (n+1-q) se2
        t0 = 0.5 * (_geo(lam, n, lam_one) ** 2 - _geo(lam2, n, lam_one))
        if lam_one:
            t1 = n * (n + 1) * (n - 1) / 3.0
        else:
            t1 = (lam * _ageo(lam, n, False) - _ageo(lam2, n, False)) / (1.0 - lam)
        return 2.0 * (cfg.sigma_w2 * t0 + cfg.sigma_e2 * ((n + 1) * t0 - t1))
    A, B = _split(cfg)
    equal = br == "lam=gamma"
    # sum_{p<q} lam^{p+q} g^{2n+2-p-q}
    s1 = 0.5 * g * g * (_mix(lam, g, n, equal) ** 2 - _mix(lam2, g * g, n, equal))
    # sum_{p<q} lam^{p+q} g^{q-p}
    if lam_one:
        s2 = n * _geo(g, n - 1, False) - _ageo(g, n - 1, False)
    else:
        s2 = lam2 / (1.0 - lam2) * (
            _geo(lam * g, n - 1, br == "lam=1/gamma")
            - _pow(lam, n + 1) * _mix(g, lam, n - 1, equal))
    return 2.0 * (A * s1 + B * s2)


def complete_homogeneous(order: int, nodes) -> float:
    """``h_order(nodes)``: sum of all monomials of total degree ``order`` in positive ``nodes``.

    Read off the corner of a power of the bidiagonal matrix with the nodes on its
    diagonal. Every entry stays nonnegative under repeated squaring, so the result
    is accurate to a few ulps even for coincident or nearly coincident nodes.
    """
    if order < 0:
        return 0.0
    nodes = [float(x) for x in nodes]
    if min(nodes) <= 0:
        raise ValueError("nodes must be positive")
    k = len(nodes)
    top = max(nodes)
    mat = np.diag(np.array(nodes) / top) + np.eye(k, k=1)
    power = order + k - 1
    acc = np.eye(k)
    while power:
        if power & 1:
            acc = acc @ mat
        power >>= 1
        if power:
            mat = mat @ mat
    return float(acc[0, k - 1]) * _pow(top, order)


def _d1_stable(cfg: TaskConfig, lam: float) -> float:
    n, g = cfg.n, cfg.gamma
    lg, g2 = lam * g, g * g
    return (cfg.sigma_w2 * lg * g2 * complete_homogeneous(n - 1, (lg, g2))
            + cfg.sigma_e2 * lg * complete_homogeneous(n - 1, (lg, g2, 1.0)))


def _d2_stable(cfg: TaskConfig, lam: float) -> float:
    n, g = cfg.n, cfg.gamma
    l2, g2 = lam * lam, g * g
    return (cfg.sigma_w2 * l2 * g2 * complete_homogeneous(n - 1, (l2, g2))
            + cfg.sigma_e2 * l2 * complete_homogeneous(n - 1, (l2, g2, 1.0)))


def _d3_stable(cfg: TaskConfig, lam: float) -> float:
    n, g = cfg.n, cfg.gamma
    l2, lg, g2 = lam * lam, lam * g, g * g
    return 2.0 * (cfg.sigma_w2 * l2 * lg * g2 * complete_homogeneous(n - 2, (l2, lg, g2))
                  + cfg.sigma_e2 * l2 * lg * complete_homogeneous(n - 2, (l2, lg, g2, 1.0)))


def d1_closed(cfg: TaskConfig, lam: float) -> float:
    if well_separated(lam, cfg.gamma):
        return _d1_explicit(cfg, lam)
    return _d1_stable(cfg, lam)


def d2_closed(cfg: TaskConfig, lam: float) -> float:
    if well_separated(lam, cfg.gamma):
        return _d2_explicit(cfg, lam)
    return _d2_stable(cfg, lam)


def d3_closed(cfg: TaskConfig, lam: float) -> float:
    if well_separated(lam, cfg.gamma):
        return _d3_explicit(cfg, lam)
    return _d3_stable(cfg, lam)


def d4_closed(cfg: TaskConfig) -> float:
    g, k = cfg.gamma, 2 * cfg.n + 2
    if abs(g - 1.0) < BRANCH_TOL:
        return cfg.sigma_w2 + (cfg.n + 1) * cfg.sigma_e2
    # (1 - g^k) / (1 - g^2) without cancellation near g = 1
    log_g = math.log(g)
    return _pow(g, k) * cfg.sigma_w2 + math.expm1(k * log_g) / math.expm1(2 * log_g) * cfg.sigma_e2


def _lam_powers(lam: float, k: np.ndarray) -> np.ndarray:
    return np.exp(k * math.log(lam))


def d1_direct(cfg: TaskConfig, lam: float) -> float:
    n = cfg.n
    i = np.arange(1, n + 1)
    return math.fsum(_lam_powers(lam, n + 1 - i) * cross_covariance_table(cfg, n + 1, i))


def d2_direct(cfg: TaskConfig, lam: float) -> float:
    n = cfg.n
    a = np.arange(1, n + 1)
    return math.fsum(_lam_powers(lam, 2 * n + 2 - 2 * a) * cross_covariance_table(cfg, a, a))


def d3_direct(cfg: TaskConfig, lam: float) -> float:
    n = cfg.n
    a, b = np.tril_indices(n, k=-1)
    a, b = a + 1, b + 1
    return 2.0 * math.fsum(_lam_powers(lam, 2 * n + 2 - a - b) * cross_covariance_table(cfg, a, b))


def effective_covariance(cfg: TaskConfig, lam: float, d2: float | None = None,
                         d3: float | None = None) -> np.ndarray:
    """``D2 (2 Lambda + tr(Lambda) I) + D3 Lambda``; raises if not positive definite."""
    if d2 is None:
        d2 = d2_closed(cfg, lam)
    if d3 is None:
        d3 = d3_closed(cfg, lam)
    cov = cfg.lambda_cov
    lt = d2 * (2.0 * cov + np.trace(cov) * np.eye(cfg.d)) + d3 * cov
    lt = 0.5 * (lt + lt.T)
    if np.linalg.eigvalsh(lt).min() <= 0:
        raise NumericalError(f"effective covariance not positive definite (D2={d2}, D3={d3})")
    return lt


@dataclass(frozen=True, eq=False)
class ConstantSet:
    d1: float
    d2: float
    d3: float
    d4: float
    lambda_tilde: np.ndarray
    lam: float
    cfg: TaskConfig

    def row(self) -> list:
        c = self.cfg
        return [self.lam, c.gamma, c.n, c.d, c.sigma_w2, c.sigma_e2, self.d1, self.d2, self.d3, self.d4]


def scalar_constants(cfg: TaskConfig, lam: float) -> tuple[float, float, float, float]:
    """``(D1, D2, D3, D4)``; direct sums up to ``DIRECT_MAX_N`` (cross-checked in debug runs)."""
    if not lam > 0:
        raise ValueError(f"forgetting factor must be > 0, got {lam}")
    closed = (d1_closed(cfg, lam), d2_closed(cfg, lam), d3_closed(cfg, lam))
    if cfg.n > DIRECT_MAX_N:
        return (*closed, d4_closed(cfg))
    direct = (d1_direct(cfg, lam), d2_direct(cfg, lam), d3_direct(cfg, lam))
    if __debug__:
        for name, c, r in zip(("D1", "D2", "D3"), closed, direct):
            if abs(c - r) > 1e-9 * max(abs(r), 1e-300):
                log.warning("%s closed form %r disagrees with direct sum %r "
                            "(lam=%r, gamma=%r, n=%d)", name, c, r, lam, cfg.gamma, cfg.n)
    return (*direct, d4_closed(cfg))


def constant_set(cfg: TaskConfig, lam: float) -> ConstantSet:
    d1, d2, d3, d4 = scalar_constants(cfg, lam)
    return ConstantSet(d1=d1, d2=d2, d3=d3, d4=d4,
                       lambda_tilde=effective_covariance(cfg, lam, d2, d3), lam=float(lam), cfg=cfg)
