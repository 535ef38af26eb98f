"""Population-level quantities in reduced coordinates ``(U11, u)``.

With ``Lt`` the effective covariance and ``L`` the input covariance, the reduced
loss is

    Lred(U, u) = u^2/2 tr(Lt L U L U^T) - D1 u tr(L^2 U^T),

which differs from half the expected squared error by the constant
``D4 tr(L) / 2``. Every comparison against a Monte Carlo squared error makes the
factor of two explicit at the call site.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .constants import ConstantSet, NumericalError, constant_set, scalar_constants
from .gla_core import ReducedParams
from .task_gen import ConfigError, TaskConfig

EIG_FLOOR = 1e-300


def _eigh_spd(mat: np.ndarray, name: str):
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    if vals.min() <= EIG_FLOOR:
        raise NumericalError(f"{name} is not positive definite (min eigenvalue {vals.min():.3e})")
    return vals, vecs


def spd_power(mat: np.ndarray, power: float, name: str = "matrix") -> np.ndarray:
    vals, vecs = _eigh_spd(mat, name)
    return (vecs * vals ** power) @ vecs.T


def spectral_norm(mat: np.ndarray) -> float:
    return float(np.linalg.norm(mat, 2))


@dataclass(frozen=True, eq=False)
class InitConfig:
    """Balanced start ``U11 = sigma Theta Theta^T``, ``u = sigma``."""

    sigma: float
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
            raise ConfigError(f"theta must be square, got {theta.shape}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if abs(np.linalg.norm(theta @ theta.T) - 1.0) > 1e-10:
            raise ConfigError("theta must satisfy ||theta theta^T||_F = 1")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma", float(self.sigma))

    @classmethod
    def normalized(cls, sigma: float, theta: np.ndarray) -> "InitConfig":
        theta = np.asarray(theta, dtype=float)
        return cls(sigma, theta / math.sqrt(np.linalg.norm(theta @ theta.T)))

    def validate(self, cs: ConstantSet) -> None:
        """Check the conditions that depend on the task: ``Lambda Theta != 0`` and the sigma bound."""
        if self.theta.shape[0] != cs.cfg.d:
            raise ConfigError(f"theta is {self.theta.shape[0]}-dimensional but the task has d={cs.cfg.d}")
        if np.linalg.norm(cs.cfg.lambda_cov @ self.theta) <= 1e-12:
            raise ConfigError("Lambda @ theta must be nonzero")
        bound = sigma_bound(cs)
        if not self.sigma < bound:
            raise ConfigError(f"sigma={self.sigma} violates the bound sigma < {bound}")


@dataclass(frozen=True, eq=False)
class TestConfig:
    """Test-time prompt distribution and forgetting factor (barred quantities)."""

    __test__ = False  # not a pytest class

    m: int
    gamma_bar: float
    sigma_w2_bar: float
    sigma_e2_bar: float
    lam_bar: float
    lambda_cov_bar: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.lam_bar <= 1.0:
            raise ConfigError(f"lam_bar must lie in (0, 1], got {self.lam_bar}")

    def task(self, d: int) -> TaskConfig:
        return TaskConfig(d=d, n=self.m, gamma=self.gamma_bar, sigma_w2=self.sigma_w2_bar,
                          sigma_e2=self.sigma_e2_bar, lambda_cov=self.lambda_cov_bar)

    @classmethod
    def matching(cls, cfg: TaskConfig, lam: float, **changes) -> "TestConfig":
        """Test distribution equal to the training one, optionally with some fields changed."""
        fields = dict(m=cfg.n, gamma_bar=cfg.gamma, sigma_w2_bar=cfg.sigma_w2,
                      sigma_e2_bar=cfg.sigma_e2, lam_bar=lam, lambda_cov_bar=cfg.lambda_cov)
        fields.update(changes)
        return cls(**fields)


def closed_form_optimum(cs: ConstantSet) -> ReducedParams:
    """The balanced global minimiser reached by gradient flow from a balanced start."""
    lt_inv = spd_power(cs.lambda_tilde, -1.0, "effective covariance")
    scale = float(np.linalg.norm(lt_inv))
    return ReducedParams(math.sqrt(cs.d1 / scale) * lt_inv, math.sqrt(cs.d1 * scale))


def optimal_product(cs: ConstantSet) -> np.ndarray:
    """``D1 Lt^{-1}``, the value of ``u U11`` at every global minimiser."""
    return cs.d1 * spd_power(cs.lambda_tilde, -1.0, "effective covariance")


def population_loss_reduced(rp: ReducedParams, cs: ConstantSet) -> float:
    cov = cs.cfg.lambda_cov
    u, mat = rp.u_neg1, rp.u11
    quad = np.trace(cs.lambda_tilde @ cov @ mat @ cov @ mat.T)
    lin = np.trace(cov @ cov @ mat.T)
    return float(0.5 * u * u * quad - cs.d1 * u * lin)


def reduced_loss_min(cs: ConstantSet) -> float:
    cov = cs.cfg.lambda_cov
    lt_inv = spd_power(cs.lambda_tilde, -1.0, "effective covariance")
    return float(-0.5 * cs.d1 ** 2 * np.trace(cov @ cov @ lt_inv))


def population_loss_residual(rp: ReducedParams, cs: ConstantSet) -> float:
    """``Lred - min Lred`` written as a weighted squared distance to the optimal product."""
    cov = cs.cfg.lambda_cov
    cov_half = spd_power(cov, 0.5, "input covariance")
    lt_half = spd_power(cs.lambda_tilde, 0.5, "effective covariance")
    lt_inv = spd_power(cs.lambda_tilde, -1.0, "effective covariance")
    inner = rp.u_neg1 * cov_half @ rp.u11 @ cov_half - cs.d1 * cov @ lt_inv
    return float(0.5 * np.sum((lt_half @ inner) ** 2))


def product_residual(rp: ReducedParams, cs: ConstantSet) -> float:
    """``||u U11 - D1 Lt^{-1}||_F``."""
    return float(np.linalg.norm(rp.product() - optimal_product(cs)))


def flow_field(rp: ReducedParams, cs: ConstantSet) -> tuple[np.ndarray, float]:
    """Negative gradient of the reduced loss in ``(U11, u)``."""
    cov = cs.cfg.lambda_cov
    u, mat = rp.u_neg1, rp.u11
    lt_cov_u_cov = cs.lambda_tilde @ cov @ mat @ cov
    cov2 = cov @ cov
    d_mat = -u * u * lt_cov_u_cov + cs.d1 * u * cov2
    d_u = -u * np.trace(lt_cov_u_cov @ mat.T) + cs.d1 * np.trace(cov2 @ mat.T)
    return d_mat, float(d_u)


def sigma_bound(cs: ConstantSet) -> float:
    """Upper limit on the initial scale; spectral norm of the effective covariance."""
    return math.sqrt(2.0 * cs.d1 / (math.sqrt(cs.cfg.d) * spectral_norm(cs.lambda_tilde)))


def _margin(cs: ConstantSet, init: InitConfig) -> float:
    init.validate(cs)
    return 2.0 * cs.d1 - math.sqrt(cs.cfg.d) * init.sigma ** 2 * spectral_norm(cs.lambda_tilde)


def pl_constant(cs: ConstantSet, init: InitConfig) -> float:
    """Rate ``alpha`` with ``gap(t) <= exp(-alpha t) gap(0)`` along gradient flow."""
    cov = cs.cfg.lambda_cov
    cov_inv = spd_power(cov, -1.0, "input covariance")
    lt_inv = spd_power(cs.lambda_tilde, -1.0, "effective covariance")
    d = cs.cfg.d
    num = init.sigma ** 2 * np.linalg.norm(cov @ init.theta) ** 2 * _margin(cs, init)
    den = (cs.d1 * math.sqrt(d) * spectral_norm(cov) ** 2
           * np.trace(lt_inv @ cov_inv) * np.trace(cov_inv))
    return float(num / den)


def positivity_floor(cs: ConstantSet, init: InitConfig) -> float:
    """Lower bound on ``u(t)`` along gradient flow from ``init``."""
    num = init.sigma ** 2 * np.linalg.norm(cs.cfg.lambda_cov @ init.theta) ** 2 * _margin(cs, init)
    den = 2.0 * cs.d1 * math.sqrt(cs.cfg.d) * spectral_norm(cs.cfg.lambda_cov) ** 2
    return math.sqrt(num / den)


def _error_formula(d1_train, lt_inv, dbar: Sequence[float], cov_bar) -> float:
    d1_bar, d2_bar, d3_bar, d4_bar = dbar
    mid = cov_bar @ lt_inv @ cov_bar  # L Lt^-1 L
    sandwich = mid @ lt_inv @ cov_bar  # L Lt^-1 L Lt^-1 L
    second = d2_bar * (np.trace(cov_bar) * np.trace(lt_inv @ cov_bar @ lt_inv @ cov_bar)
                       + 2.0 * np.trace(sandwich)) + d3_bar * np.trace(sandwich)
    return float(d1_train ** 2 * second + d4_bar * np.trace(cov_bar)
                 - 2.0 * d1_train * d1_bar * np.trace(mid))


def training_error(cs: ConstantSet) -> float:
    """``E[(yhat - y)^2]`` at the global optimum on the training distribution."""
    lt_inv = spd_power(cs.lambda_tilde, -1.0, "effective covariance")
    return _error_formula(cs.d1, lt_inv, (cs.d1, cs.d2, cs.d3, cs.d4), cs.cfg.lambda_cov)


def isotropic_training_error(cs: ConstantSet) -> float:
    """Scalar form of :func:`training_error`; valid only when the input covariance is the identity."""
    d = cs.cfg.d
    return d * cs.d4 - d * cs.d1 ** 2 / ((2 + d) * cs.d2 + cs.d3)


def testing_error(cs_train: ConstantSet, test: TestConfig) -> float:
    """``E[(yhat - y)^2]`` of the trained optimum on test prompts with forgetting factor ``lam_bar``."""
    tcfg = test.task(cs_train.cfg.d)
    lt_inv = spd_power(cs_train.lambda_tilde, -1.0, "effective covariance")
    return _error_formula(cs_train.d1, lt_inv, scalar_constants(tcfg, test.lam_bar), tcfg.lambda_cov)


@dataclass(frozen=True)
class LambdaSweep:
    lambdas: tuple
    errors: tuple

    @property
    def argmin(self) -> float:
        return self.lambdas[int(np.argmin(self.errors))]

    def rows(self) -> list:
        return list(zip(self.lambdas, self.errors))


def lambda_sweep_theoretical(cfg: TaskConfig, lambdas: Sequence[float]) -> LambdaSweep:
    lambdas = tuple(float(x) for x in lambdas)
    if not lambdas:
        raise ConfigError("lambdas must be non-empty")
    bad = [x for x in lambdas if not 0.0 < x <= 1.0]
    if bad:
        raise ConfigError(f"lambdas must lie in (0, 1], got {bad}")
    return LambdaSweep(lambdas, tuple(training_error(constant_set(cfg, x)) for x in lambdas))
