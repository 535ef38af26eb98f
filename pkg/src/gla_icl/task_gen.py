"""AR(1) weight paths, in-context regression prompts and their second-order statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# stream ids for keyed generators
STREAM_WEIGHTS = 0
STREAM_INPUTS = 1
STREAM_BATCH = 2
STREAM_TRACK = 3

GAMMA_ONE_TOL = 1e-9


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent, reproducible generator for the stream ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


@dataclass(frozen=True, eq=False)
class TaskConfig:
    """Generative model for one task distribution.

    ``lambda_cov`` defaults to the identity when omitted.
    """

    d: int
    n: int
    gamma: float
    sigma_w2: float = 1.0
    sigma_e2: float = 0.01
    lambda_cov: np.ndarray | None = None

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"d must be a positive integer, got {self.d}")
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"n must be a positive integer, got {self.n}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.sigma_w2 < 0 or self.sigma_e2 < 0:
            raise ConfigError("sigma_w2 and sigma_e2 must be >= 0")
        cov = np.eye(self.d) if self.lambda_cov is None else np.array(self.lambda_cov, dtype=float)
        if cov.shape != (self.d, self.d):
            raise ConfigError(f"lambda_cov must be {self.d}x{self.d}, got {cov.shape}")
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise ConfigError("lambda_cov must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise ConfigError("lambda_cov must be positive definite")
        cov.setflags(write=False)
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "sigma_w2", float(self.sigma_w2))
        object.__setattr__(self, "sigma_e2", float(self.sigma_e2))
        object.__setattr__(self, "lambda_cov", cov)

    @cached_property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.lambda_cov)

    def replace(self, **changes) -> "TaskConfig":
        fields = dict(d=self.d, n=self.n, gamma=self.gamma, sigma_w2=self.sigma_w2,
                      sigma_e2=self.sigma_e2, lambda_cov=self.lambda_cov)
        fields.update(changes)
        if "d" in changes and "lambda_cov" not in changes:
            fields["lambda_cov"] = None
        return TaskConfig(**fields)

    def as_dict(self) -> dict:
        return dict(d=self.d, n=self.n, gamma=self.gamma, sigma_w2=self.sigma_w2,
                    sigma_e2=self.sigma_e2, lambda_cov=self.lambda_cov.tolist())


@dataclass(frozen=True)
class WeightPath:
    """``weights[i-1]`` holds ``w_i`` for i = 1..n+1; ``w0`` is kept for covariance checks."""

    w0: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 2 or self.w0.shape != self.weights.shape[1:]:
            raise ConfigError("weights must be (n+1, d) and w0 must be (d,)")


@dataclass(frozen=True)
class Prompt:
    tokens: np.ndarray  # (d+1, n+1), query label slot is zero
    query_label: float
    path: WeightPath = field(repr=False)

    @property
    def d(self) -> int:
        return self.tokens.shape[0] - 1

    @property
    def n(self) -> int:
        return self.tokens.shape[1] - 1

    @property
    def inputs(self) -> np.ndarray:
        return self.tokens[:-1]

    @property
    def labels(self) -> np.ndarray:
        return self.tokens[-1, :-1]


def sample_weight_path(cfg: TaskConfig, seed: int) -> WeightPath:
    rng = keyed_rng(seed, STREAM_WEIGHTS)
    w0 = math.sqrt(cfg.sigma_w2) * rng.standard_normal(cfg.d)
    innov = math.sqrt(cfg.sigma_e2) * rng.standard_normal((cfg.n + 1, cfg.d))
    weights = np.empty_like(innov)
    prev = w0
    for i in range(cfg.n + 1):
        prev = cfg.gamma * prev + innov[i]
        weights[i] = prev
    return WeightPath(w0=w0, weights=weights)


def build_prompt(cfg: TaskConfig, path: WeightPath, seed: int) -> Prompt:
    if path.weights.shape != (cfg.n + 1, cfg.d):
        raise ConfigError(
            f"path has shape {path.weights.shape}, expected {(cfg.n + 1, cfg.d)}")
    rng = keyed_rng(seed, STREAM_INPUTS)
    x = rng.standard_normal((cfg.n + 1, cfg.d)) @ cfg.chol.T
    y = np.einsum("ij,ij->i", path.weights, x)
    tokens = np.empty((cfg.d + 1, cfg.n + 1))
    tokens[:-1] = x.T
    tokens[-1] = y
    tokens[-1, -1] = 0.0
    return Prompt(tokens=tokens, query_label=float(y[-1]), path=path)


def sample_prompt(cfg: TaskConfig, seed: int) -> Prompt:
    return build_prompt(cfg, sample_weight_path(cfg, seed), seed)


@dataclass(frozen=True)
class PromptBatch:
    """Array form of many prompts: ``x`` is (B, n+1, d), ``y`` is (B, n+1) incl. the query label."""

    x: np.ndarray
    y: np.ndarray

    @property
    def context_x(self) -> np.ndarray:
        return self.x[:, :-1]

    @property
    def context_y(self) -> np.ndarray:
        return self.y[:, :-1]

    @property
    def query_x(self) -> np.ndarray:
        return self.x[:, -1]

    @property
    def query_y(self) -> np.ndarray:
        return self.y[:, -1]

    def tokens(self) -> np.ndarray:
        """Token rows per prompt, (B, n+1, d+1), with the query label slot zeroed."""
        z = np.concatenate([self.x, self.y[..., None]], axis=-1)
        z[:, -1, -1] = 0.0
        return z


def sample_batch(cfg: TaskConfig, size: int, seed: int, *keys: int) -> PromptBatch:
    """Draw ``size`` i.i.d. prompts (fresh w0 per prompt) from the stream ``(seed, *keys)``."""
    rng = keyed_rng(seed, STREAM_BATCH, *keys)
    sw, se = math.sqrt(cfg.sigma_w2), math.sqrt(cfg.sigma_e2)
    w = sw * rng.standard_normal((size, cfg.d))
    x = rng.standard_normal((size, cfg.n + 1, cfg.d))
    if not np.array_equal(cfg.lambda_cov, np.eye(cfg.d)):
        x = x @ cfg.chol.T
    path = rng.standard_normal((size, cfg.n + 1, cfg.d))
    path *= se
    for i in range(cfg.n + 1):
        w = path[:, i] = cfg.gamma * w + path[:, i]
    path *= x
    return PromptBatch(x=x, y=path.sum(axis=2))


def iter_batches(cfg: TaskConfig, total: int, seed: int, chunk: int = 10_000):
    """Yield prompt batches covering ``total`` prompts; chunk k uses stream ``(seed, k)``."""
    for k, start in enumerate(range(0, total, chunk)):
        yield sample_batch(cfg, min(chunk, total - start), seed, k)


def weight_cross_covariance(cfg: TaskConfig, a: int, b: int) -> float:
    """Scalar ``c`` with ``E[w_a w_b^T] = c I``."""
    if a < 0 or b < 0:
        raise ValueError("indices must be >= 0")
    g = cfg.gamma
    m = min(a, b)
    if abs(g - 1.0) < GAMMA_ONE_TOL:
        return cfg.sigma_w2 + m * cfg.sigma_e2
    # sum_{j=1}^{m} g^{a+b-2j} = g^{|a-b|} (1 - g^{2m}) / (1 - g^2), evaluated without cancellation
    log_g = math.log(g)
    ratio = math.expm1(2 * m * log_g) / math.expm1(2 * log_g) if m else 0.0
    return g ** (a + b) * cfg.sigma_w2 + g ** abs(a - b) * ratio * cfg.sigma_e2


def cross_covariance_table(cfg: TaskConfig, a, b) -> np.ndarray:
    """Vectorised :func:`weight_cross_covariance` over broadcast index arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = np.minimum(a, b)
    g = cfg.gamma
    if abs(g - 1.0) < GAMMA_ONE_TOL:
        return cfg.sigma_w2 + m * cfg.sigma_e2
    log_g = math.log(g)
    ratio = np.expm1(2 * m * log_g) / math.expm1(2 * log_g)
    return np.exp((a + b) * log_g) * cfg.sigma_w2 + np.exp(np.abs(a - b) * log_g) * ratio * cfg.sigma_e2
