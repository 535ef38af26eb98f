"""Gradient flow in reduced coordinates, stochastic training on sampled prompts, Monte Carlo error."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .constants import ConstantSet, NumericalError
from .gla_core import (GlaParams, ReducedParams, predict_batch_with_grad, predict_xy_with_grad,
                       predict_reduced_batch, reduced_features, stack_forward_batch,
                       stack_loss_and_grads)
from .task_gen import ConfigError, PromptBatch, TaskConfig, iter_batches, sample_batch
from .theory import InitConfig, TestConfig, spd_power, spectral_norm

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
# keeps RK4 drift of the balancedness invariant below 1e-8
STEP_SCALE = 0.05


def init_from_assumption(init: InitConfig, cs: ConstantSet | None = None) -> ReducedParams:
    """``U11 = sigma Theta Theta^T`` and ``u = sigma``; validated against ``cs`` when given."""
    if cs is not None:
        init.validate(cs)
    return ReducedParams(init.sigma * init.theta @ init.theta.T, init.sigma)


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    loss_gaps: np.ndarray
    balancedness_residuals: np.ndarray
    residuals: np.ndarray
    step: float = float("nan")

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.states) == len(self.loss_gaps) == len(self.balancedness_residuals)
                == len(self.residuals) == n):
            raise ValueError("trajectory fields must have equal lengths")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def final(self):
        return self.states[-1]

    def rows(self) -> list:
        return [list(r) for r in zip(self.times, self.loss_gaps, self.residuals,
                                     self.balancedness_residuals)]


class _Geometry:
    """Matrices reused at every flow evaluation."""

    def __init__(self, cs: ConstantSet):
        self.cs = cs
        self.cov = cs.cfg.lambda_cov
        self.cov2 = self.cov @ self.cov
        self.lt = cs.lambda_tilde
        self.cov_half = spd_power(self.cov, 0.5, "input covariance")
        self.lt_half = spd_power(self.lt, 0.5, "effective covariance")
        self.target = cs.d1 * spd_power(self.lt, -1.0, "effective covariance")

    def field(self, mat, u):
        a = self.lt @ self.cov @ mat @ self.cov
        d_mat = -u * u * a + self.cs.d1 * u * self.cov2
        d_u = -u * np.sum(a * mat) + self.cs.d1 * np.sum(self.cov2 * mat)
        return d_mat, d_u

    def gap_of_product(self, prod):
        inner = self.cov_half @ prod @ self.cov_half - self.cov @ self.target
        return 0.5 * float(np.sum((self.lt_half @ inner) ** 2))

    def gap(self, mat, u):
        return self.gap_of_product(u * mat)

    def residual(self, prod):
        return float(np.linalg.norm(prod - self.target))


def default_step(cs: ConstantSet, start: ReducedParams) -> float:
    """``0.05 / (||Lt|| ||L||^2 u^2 + D1 ||L||^2)`` with ``u^2`` the larger of its start and optimal values."""
    cov_norm2 = spectral_norm(cs.cfg.lambda_cov) ** 2
    lt_norm = spectral_norm(cs.lambda_tilde)
    u_star2 = cs.d1 * float(np.linalg.norm(spd_power(cs.lambda_tilde, -1.0)))
    u2 = max(start.u_neg1 ** 2, u_star2)
    return STEP_SCALE / (lt_norm * cov_norm2 * u2 + cs.d1 * cov_norm2)


def _rk4(geom: _Geometry, mat, u, h):
    k1m, k1u = geom.field(mat, u)
    k2m, k2u = geom.field(mat + 0.5 * h * k1m, u + 0.5 * h * k1u)
    k3m, k3u = geom.field(mat + 0.5 * h * k2m, u + 0.5 * h * k2u)
    k4m, k4u = geom.field(mat + h * k3m, u + h * k3u)
    return (mat + h / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m),
            u + h / 6.0 * (k1u + 2 * k2u + 2 * k3u + k4u))


def gradient_flow(init: ReducedParams, cs: ConstantSet, t_end: float, step: float | None = None,
                  tol: float = 1e-10, rtol: float = 1e-10, record_every: int = 1,
                  max_halvings: int = 20) -> Trajectory:
    """Classical RK4 on the reduced flow until ``t_end`` or convergence.

    Converged means ``||u U11 - D1 Lt^-1||_F`` is below both ``tol`` and
    ``rtol * ||D1 Lt^-1||_F``.

    If the loss gap ever exceeds ``10x`` its initial value the run restarts from
    ``init`` with half the step.
    """
    if not t_end > 0:
        raise ConfigError("t_end must be > 0")
    if init.d != cs.cfg.d:
        raise ConfigError(f"initial state has d={init.d}, task has d={cs.cfg.d}")
    h = default_step(cs, init) if step is None else float(step)
    if not h > 0:
        raise ConfigError("step must be > 0")
    geom = _Geometry(cs)
    tol = min(tol, rtol * float(np.linalg.norm(geom.target)))
    for _ in range(max_halvings + 1):
        traj = _integrate(geom, init, t_end, h, tol, max(1, int(record_every)))
        if traj is not None:
            return traj
        log.info("gradient flow diverged with step %g; halving", h)
        h *= 0.5
    raise NumericalError(f"gradient flow diverged even with step {h * 2:g}")


def _integrate(geom, init, t_end, h, tol, record_every):
    mat, u = init.u11.copy(), init.u_neg1
    gap0 = geom.gap(mat, u)
    times, states, gaps, bal, res = [], [], [], [], []

    def record(t):
        times.append(t)
        states.append(ReducedParams(mat.copy(), u))
        gaps.append(geom.gap(mat, u))
        bal.append(u * u - float(np.sum(mat * mat)))
        res.append(geom.residual(u * mat))

    record(0.0)
    if res[-1] < tol:
        return Trajectory(np.array(times), states, np.array(gaps), np.array(bal), np.array(res), h)
    n_steps = int(math.ceil(t_end / h - 1e-12))
    for k in range(1, n_steps + 1):
        mat, u = _rk4(geom, mat, u, h)
        t = k * h
        gap = geom.gap(mat, u)
        if not math.isfinite(gap) or gap > DIVERGENCE_FACTOR * max(gap0, 1e-300):
            return None
        residual = geom.residual(u * mat)
        if residual < tol or k == n_steps or k % record_every == 0:
            record(t)
        if residual < tol:
            break
    return Trajectory(np.array(times), states, np.array(gaps), np.array(bal), np.array(res), h)


# stochastic training


OPTIMIZERS = ("plain-gd", "adaptive-moment")


@dataclass(frozen=True)
class SgdConfig:
    """Mini-batch training settings; ``step_size`` decays geometrically to ``step_size * decay_to``."""

    batch_size: int = 5000
    step_size: float = 0.05
    steps: int = 2000
    optimizer_kind: str = "plain-gd"
    moment_decays: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    seed: int = 0
    decay_to: float = 1.0
    eps: float = 1e-8
    record_every: int = 1

    def __post_init__(self):
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("batch_size must be a positive integer")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError("steps must be a positive integer")
        if not self.step_size >= 0:
            raise ConfigError(f"step_size must be >= 0, got {self.step_size}")
        if self.optimizer_kind not in OPTIMIZERS:
            raise ConfigError(f"optimizer_kind must be one of {OPTIMIZERS}")
        b1, b2 = self.moment_decays
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("moment decays must lie in [0, 1)")
        if self.weight_decay < 0 or not self.decay_to > 0:
            raise ConfigError("weight_decay must be >= 0 and decay_to > 0")

    def lr(self, k: int) -> float:
        if self.steps == 1:
            return self.step_size
        return self.step_size * self.decay_to ** (k / (self.steps - 1))


class _Optimizer:
    def __init__(self, opt: SgdConfig, shapes: Sequence[tuple]):
        self.opt = opt
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.k = 0

    def step(self, params: list, grads: list) -> list:
        opt = self.opt
        lr = opt.lr(self.k)
        self.k += 1
        if opt.optimizer_kind == "plain-gd":
            return [p - lr * (g + opt.weight_decay * p) for p, g in zip(params, grads)]
        b1, b2 = opt.moment_decays
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.k)
            vhat = self.v[i] / (1 - b2 ** self.k)
            out.append(p - lr * (mhat / (np.sqrt(vhat) + opt.eps) + opt.weight_decay * p))
        return out


def effective_product(params) -> np.ndarray:
    """Matrix ``M`` of the label-odd part of the prediction, ``sum_i lam^. y_i x_i^T M x_q``."""
    if isinstance(params, ReducedParams):
        return params.product()
    d = params.d
    return params.w_v[d, d] * params.w_kq[:d, :d] + np.outer(params.w_v[d, :d], params.w_kq[d, :d])


def _odd_prediction(prod, batch, lam, features=None):
    r = reduced_features(batch, lam) if features is None else features
    return np.einsum("bi,ij,bj->b", r, prod, batch.query_x)


@dataclass
class SgdResult:
    trajectory: Trajectory
    batch_losses: np.ndarray
    params: object


def _reduced_loss_grad(rp: ReducedParams, batch: PromptBatch, lam: float):
    r = reduced_features(batch, lam)
    s = np.einsum("bi,ij,bj->b", r, rp.u11, batch.query_x)
    resid = rp.u_neg1 * s - batch.query_y
    nb = len(resid)
    loss = 0.5 * float(resid @ resid) / nb
    g_u = float(resid @ s) / nb
    g_mat = rp.u_neg1 * np.einsum("b,bi,bj->ij", resid, r, batch.query_x) / nb
    return loss, [g_mat, np.array(g_u)], 0.0


def _full_loss_grad(params: GlaParams, batch: PromptBatch):
    y = batch.y.copy()
    y[:, -1] = 0.0
    yhat, dv, dk_left = predict_xy_with_grad(params, batch.x, y)
    resid = yhat - batch.query_y
    nb = len(resid)
    loss = 0.5 * float(resid @ resid) / nb
    g_wv = np.zeros_like(params.w_v)
    g_wkq = np.zeros_like(params.w_kq)
    g_wv[-1] = resid @ dv / nb
    g_wkq[:, :-1] = (dk_left * resid[:, None]).T @ batch.query_x / nb
    odd = _odd_prediction(effective_product(params), batch, params.lam)
    even_energy = 0.5 * float(np.mean((yhat - odd) ** 2))
    return loss, [g_wv, g_wkq], even_energy


def loss_and_grad(params, batch: PromptBatch, lam: float | None = None):
    """Mini-batch loss ``(1/2B) sum (yhat - y)^2`` and its analytic gradient.

    For :class:`ReducedParams` the gradient is ``[dU11, du]``; for
    :class:`GlaParams` it is ``[dW_V, dW_KQ]`` with zeros outside the blocks that
    reach the prediction. The third return value is half the batch mean of the
    squared label-even part of the prediction (zero in reduced coordinates).
    """
    if isinstance(params, ReducedParams):
        if lam is None:
            raise ConfigError("lam is required for reduced parameters")
        return _reduced_loss_grad(params, batch, lam)
    return _full_loss_grad(params, batch)


def sgd_train(init, cfg: TaskConfig, lam: float, opt: SgdConfig, cs: ConstantSet | None = None,
              stop: Callable[[int, object], bool] | None = None) -> SgdResult:
    """Train on fresh prompts each step; returns per-step losses and a gap trajectory.

    The recorded loss gap is the exact population gap of the label-odd part
    (a function of :func:`effective_product`) plus the batch estimate of half
    the even part's second moment; for reduced parameters it is exact.
    ``stop(k, params)`` is called after every update and ends training early
    when it returns true.
    """
    from .constants import constant_set

    if cs is None:
        cs = constant_set(cfg, lam)
    geom = _Geometry(cs)
    reduced = isinstance(init, ReducedParams)
    if reduced:
        tensors = [init.u11.copy(), np.array(init.u_neg1, dtype=float)]
    else:
        if abs(init.lam - lam) > 0:
            raise ConfigError(f"parameters carry lam={init.lam} but training uses lam={lam}")
        tensors = [init.w_v.copy(), init.w_kq.copy()]
    if tensors[0].shape[0] != cfg.d + (0 if reduced else 1):
        raise ConfigError("parameter dimension does not match the task")

    def build(ts):
        return ReducedParams(ts[0], float(ts[1])) if reduced else GlaParams(ts[0], ts[1], lam)

    optimizer = _Optimizer(opt, [t.shape for t in tensors])
    times, states, gaps, bal, res, losses = [], [], [], [], [], []
    params = build(tensors)
    for k in range(opt.steps):
        batch = sample_batch(cfg, opt.batch_size, opt.seed, k)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads, even = loss_and_grad(params, batch, lam)
        if not (math.isfinite(loss) and math.isfinite(even)):
            raise NumericalError(f"non-finite training loss at step {k} (lr={opt.lr(k):g})")
        losses.append(loss)
        if k % opt.record_every == 0 or k == opt.steps - 1:
            prod = effective_product(params)
            times.append(float(k))
            states.append(params)
            gaps.append(geom.gap_of_product(prod) + even)
            res.append(geom.residual(prod))
            if reduced:
                bal.append(params.balancedness())
            else:
                d = cfg.d
                bal.append(params.w_v[d, d] ** 2 - float(np.sum(params.w_kq[:d, :d] ** 2)))
        tensors = optimizer.step(tensors, grads)
        params = build(tensors)
        if stop is not None and stop(k, params):
            break
    traj = Trajectory(np.array(times), states, np.array(gaps), np.array(bal), np.array(res), opt.step_size)
    return SgdResult(traj, np.array(losses), params)


def geometric_decay_ratio(gaps: Sequence[float], window: int = 50, floor: float = 0.0) -> float:
    """Median ratio of consecutive ``window``-step mean gaps while the gap stays above ``floor``."""
    gaps = np.asarray(gaps, dtype=float)
    nwin = len(gaps) // window
    means = gaps[: nwin * window].reshape(nwin, window).mean(axis=1)
    ratios = []
    for a, b in zip(means[:-1], means[1:]):
        if a <= floor or b <= floor:
            break
        ratios.append(b / a)
    if not ratios:
        return float("nan")
    return float(np.median(ratios))


# multilayer stack


@dataclass
class StackResult:
    layers: list
    batch_losses: np.ndarray


def sgd_train_stack(layers: Sequence[GlaParams], cfg: TaskConfig, opt: SgdConfig) -> StackResult:
    """Train every W_V and W_KQ of a residual stack by mini-batch gradient steps."""
    lams = [layer.lam for layer in layers]
    tensors = [t.copy() for layer in layers for t in (layer.w_v, layer.w_kq)]
    optimizer = _Optimizer(opt, [t.shape for t in tensors])
    losses = []

    def build(ts):
        return [GlaParams(ts[2 * i], ts[2 * i + 1], lams[i]) for i in range(len(lams))]

    current = build(tensors)
    for k in range(opt.steps):
        batch = sample_batch(cfg, opt.batch_size, opt.seed, k)
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = stack_loss_and_grads(current, batch.tokens(), batch.query_y)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite stack loss at step {k}")
        losses.append(loss)
        tensors = optimizer.step(tensors, [g for pair in grads for g in pair])
        current = build(tensors)
    return StackResult(current, np.array(losses))


# Monte Carlo


def mc_squared_error(predict_fn: Callable[[PromptBatch], np.ndarray], cfg: TaskConfig, trials: int,
                     seed: int, chunk: int = 10_000) -> tuple[float, float]:
    """Mean and standard error of ``(yhat - y)^2`` over ``trials`` fresh prompts."""
    if trials < 2:
        raise ConfigError("trials must be >= 2")
    errs = [(predict_fn(batch) - batch.query_y) ** 2 for batch in iter_batches(cfg, trials, seed, chunk)]
    e = np.concatenate(errs)
    return float(np.mean(e)), float(np.std(e, ddof=1) / math.sqrt(len(e)))


def mc_error_estimate(rp: ReducedParams, cfg: TaskConfig | TestConfig, lam: float | None,
                      trials: int, seed: int, chunk: int = 10_000) -> tuple[float, float]:
    """Monte Carlo ``E[(yhat - y)^2]`` for reduced parameters; ``lam`` defaults to ``lam_bar`` for test configs."""
    if isinstance(cfg, TestConfig):
        lam = cfg.lam_bar if lam is None else lam
        cfg = cfg.task(rp.d)
    if lam is None:
        raise ConfigError("lam is required")
    return mc_squared_error(lambda b: predict_reduced_batch(rp, b, lam), cfg, trials, seed, chunk)


def mc_error_params(params: GlaParams, cfg: TaskConfig, trials: int, seed: int,
                    chunk: int = 10_000) -> tuple[float, float]:
    from .gla_core import predict_batch

    return mc_squared_error(lambda b: predict_batch(params, b.tokens()), cfg, trials, seed, chunk)


def mc_error_stack(layers: Sequence[GlaParams], cfg: TaskConfig, trials: int, seed: int,
                   chunk: int = 2_000) -> tuple[float, float]:
    return mc_squared_error(lambda b: stack_forward_batch(layers, b.tokens()), cfg, trials, seed, chunk)
