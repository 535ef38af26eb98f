"""LMS and RLS filters tracking the AR(1) regression stream one sample at a time."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .task_gen import STREAM_TRACK, ConfigError, TaskConfig, keyed_rng

TAIL_FRACTION = 0.2
DEFAULT_DELTA = 1e-2


@dataclass(frozen=True)
class StreamResult:
    """Per-step mean squared prediction error over the trials that stayed finite.

    ``steady_state_mean`` averages the last ``window`` steps; ``stderr`` is the
    standard error of that average across trials.
    """

    per_step_sq_error: np.ndarray
    steady_state_mean: float
    all_step_mean: float
    stderr: float
    trials: int
    diverged_count: int
    reinit_count: int
    window: int


def tail_window(length: int) -> int:
    return max(1, int(round(TAIL_FRACTION * length)))


def _stream_chunk(cfg: TaskConfig, size: int, length: int, seed: int, chunk: int):
    rng = keyed_rng(seed, STREAM_TRACK, chunk)
    w0 = math.sqrt(cfg.sigma_w2) * rng.standard_normal((size, cfg.d))
    innov = rng.standard_normal((size, length, cfg.d))
    innov *= math.sqrt(cfg.sigma_e2)
    x = rng.standard_normal((size, length, cfg.d))
    if not np.array_equal(cfg.lambda_cov, np.eye(cfg.d)):
        x = x @ cfg.chol.T
    return w0, innov, x


def _run(cfg, length, trials, seed, chunk, step_fn) -> StreamResult:
    if int(length) != length or length < 1:
        raise ConfigError(f"length must be a positive integer, got {length}")
    if int(trials) != trials or trials < 1:
        raise ConfigError(f"trials must be a positive integer, got {trials}")
    window = tail_window(length)
    total = np.zeros(length)
    tails = []
    diverged = reinit = 0
    for k, start in enumerate(range(0, trials, chunk)):
        size = min(chunk, trials - start)
        err, bad, resets = step_fn(*_stream_chunk(cfg, size, length, seed, k))
        diverged += int(bad.sum())
        reinit += int(resets)
        good = err[~bad]
        total += good.sum(axis=0)
        tails.append(good[:, -window:].mean(axis=1))
    tails = np.concatenate(tails)
    kept = trials - diverged
    if kept == 0:
        nan = float("nan")
        return StreamResult(np.full(length, nan), nan, nan, nan, 0, diverged, reinit, window)
    per_step = total / kept
    se = float(tails.std(ddof=1) / math.sqrt(kept)) if kept > 1 else float("nan")
    return StreamResult(per_step, float(per_step[-window:].mean()), float(per_step.mean()),
                        se, kept, diverged, reinit, window)


def lms_track(cfg: TaskConfig, mu: float, length: int, trials: int, seed: int,
              chunk: int = 500) -> StreamResult:
    """LMS from a zero estimate; trials whose error exceeds ``1e6`` are excluded and counted."""
    if not mu >= 0:
        raise ConfigError(f"mu must be >= 0, got {mu}")

    def step(w0, innov, x):
        err, bad = kernels.lms_sq_errors(w0, innov, x, cfg.gamma, float(mu))
        return err, np.asarray(bad, dtype=bool), 0

    return _run(cfg, length, trials, seed, chunk, step)


def rls_track(cfg: TaskConfig, forgetting: float, length: int, trials: int, seed: int,
              delta: float = DEFAULT_DELTA, chunk: int = 500) -> StreamResult:
    """Exponentially weighted RLS with inverse correlation started at ``I / delta``.

    The inverse correlation is reset to its start whenever ``x^T P x`` stops
    being positive; ``reinit_count`` totals those resets.
    """
    if not 0.0 < forgetting <= 1.0:
        raise ConfigError(f"forgetting must lie in (0, 1], got {forgetting}")
    if not delta > 0:
        raise ConfigError(f"delta must be > 0, got {delta}")

    def step(w0, innov, x):
        err, bad, resets = kernels.rls_sq_errors(w0, innov, x, cfg.gamma, float(forgetting), float(delta))
        return err, np.asarray(bad, dtype=bool), int(np.sum(resets))

    return _run(cfg, length, trials, seed, chunk, step)
