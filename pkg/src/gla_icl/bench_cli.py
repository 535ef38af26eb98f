"""Command line runner: one experiment per invocation, CSV on stdout or ``--out``.

Configuration is a flat ``key=value`` file (``#`` starts a comment) with dotted
group keys such as ``task.gamma=0.95``; ``--set key=value`` flags override the
file. Unknown keys and malformed values are rejected.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 a
``--check`` that did not hold.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import io
import json
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from . import adaptive_baselines as ab
from .constants import NumericalError, constant_set, d1_direct, d2_direct, d3_direct, scalar_constants
from .gla_core import GlaParams, predict_reduced_batch
from .task_gen import ConfigError, TaskConfig, keyed_rng
from .theory import (InitConfig, TestConfig, closed_form_optimum, lambda_sweep_theoretical,
                     pl_constant, sigma_bound, testing_error, training_error)
from .training import (SgdConfig, geometric_decay_ratio, gradient_flow, init_from_assumption,
                       mc_error_estimate, mc_error_params, mc_error_stack, mc_squared_error, sgd_train,
                       sgd_train_stack)

KINDS = ("constants", "sweep-lambda", "train-flow", "train-sgd", "mc-error", "baselines", "multilayer")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_CHECK = 0, 1, 2, 3


def _float_list(text: str) -> list:
    text = text.strip()
    return [float(v) for v in text.split(",")] if text else []


def _optional_float(text: str):
    return None if text.strip() in ("", "none") else float(text)


# key -> (parser, default); None defaults mean "derived from other keys"
SCHEMA = {
    "task.d": (int, 10),
    "task.n": (int, 100),
    "task.gamma": (float, 0.95),
    "task.sigma_w2": (float, 1.0),
    "task.sigma_e2": (float, 0.01),
    "task.lambda_diag": (_float_list, []),
    "lam": (float, 0.9),
    "lambdas": (_float_list, None),
    "trials": (int, 10_000),
    "test.m": (int, None),
    "test.gamma_bar": (_optional_float, None),
    "test.sigma_w2_bar": (_optional_float, None),
    "test.sigma_e2_bar": (_optional_float, None),
    "test.lam_bar": (_optional_float, None),
    "init.sigma_fraction": (float, 0.5),
    "init.theta": (str, "identity"),
    "flow.t_end": (_optional_float, None),
    "flow.record_every": (int, 100),
    "sgd.batch_size": (int, 5000),
    "sgd.step_size": (float, 0.01),
    "sgd.steps": (int, 2000),
    "sgd.optimizer_kind": (str, "adaptive-moment"),
    "sgd.beta1": (float, 0.9),
    "sgd.beta2": (float, 0.999),
    "sgd.weight_decay": (float, 0.0),
    "sgd.decay_to": (float, 0.01),
    "sgd.init_scale": (float, 0.1),
    "sgd.heldout": (int, 100_000),
    "baselines.gammas": (_float_list, [0.8, 0.85, 0.925, 0.95, 0.975]),
    "baselines.mu": (float, 0.01),
    "baselines.forgetting": (float, 0.98),
    "baselines.delta": (float, ab.DEFAULT_DELTA),
    "baselines.length": (int, 1000),
    "multilayer.max_layers": (int, 2),
    "multilayer.lam": (float, 0.85),
}

DEFAULT_SWEEP = [round(0.05 * k, 2) for k in range(1, 21)]


@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    kind: str
    task: TaskConfig
    values: dict
    seed: int
    out_path: str | None = None
    overridden: tuple = ()
    test: TestConfig | None = None
    init: InitConfig | None = None
    sgd: SgdConfig | None = None
    lambdas: tuple = field(default=())

    @property
    def trials(self) -> int:
        return self.values["trials"]

    def echo(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, **{k: self.values[k] for k in sorted(self.values)}}

    def content_hash(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def read_config_file(path: str) -> dict:
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            raw[key] = value
    return raw


def _parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = (s.strip() for s in text.split("=", 1))
    return key, value


def _coerce(raw: dict) -> dict:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    for key, text in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(text)
        except ValueError as exc:
            raise ConfigError(f"malformed value for {key}: {text!r} ({exc})") from None
    return values


def _task(values: dict) -> TaskConfig:
    diag = values["task.lambda_diag"]
    cov = None
    if diag:
        if len(diag) != values["task.d"]:
            raise ConfigError(f"task.lambda_diag has {len(diag)} entries, task.d={values['task.d']}")
        cov = np.diag(diag)
    return TaskConfig(d=values["task.d"], n=values["task.n"], gamma=values["task.gamma"],
                      sigma_w2=values["task.sigma_w2"], sigma_e2=values["task.sigma_e2"], lambda_cov=cov)


def _check_lambdas(lambdas) -> tuple:
    if not lambdas:
        raise ConfigError("lambdas must be non-empty")
    bad = [x for x in lambdas if not 0.0 < x <= 1.0]
    if bad:
        raise ConfigError(f"lambdas must lie in (0, 1], got {bad}")
    return tuple(lambdas)


def parse_config(kind: str, path: str | None = None, overrides=(), seed: int = 0,
                 out_path: str | None = None) -> ExperimentSpec:
    """Resolve defaults, then the file, then ``--set`` overrides, into a validated spec."""
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    raw = read_config_file(path) if path else {}
    flags = dict(_parse_assignment(s) for s in overrides)
    overridden = tuple(sorted(k for k in flags if raw.get(k) != flags[k]))
    raw.update(flags)
    values = _coerce(raw)
    task = _task(values)
    lam = values["lam"]
    if not 0.0 < lam <= 1.0:
        raise ConfigError(f"lam must lie in (0, 1], got {lam}")
    if values["trials"] < 2:
        raise ConfigError("trials must be >= 2")
    lambdas = values["lambdas"]
    if kind == "sweep-lambda":
        lambdas = _check_lambdas(DEFAULT_SWEEP if lambdas is None else lambdas)
    elif kind == "constants":
        lambdas = _check_lambdas([lam] if lambdas is None else lambdas)
    else:
        lambdas = ()
    values["lambdas"] = list(lambdas)

    test = None
    if kind == "mc-error":
        changes = {k: values[f"test.{k}"] for k in ("m", "gamma_bar", "sigma_w2_bar", "sigma_e2_bar", "lam_bar")
                   if values[f"test.{k}"] is not None}
        test = TestConfig.matching(task, lam, **changes)

    init = None
    if kind == "train-flow":
        frac = values["init.sigma_fraction"]
        if not 0 < frac < 1:
            raise ConfigError("init.sigma_fraction must lie in (0, 1)")
        theta_kind = values["init.theta"]
        if theta_kind == "identity":
            theta = np.eye(task.d)
        elif theta_kind == "random":
            theta = keyed_rng(seed, 7).standard_normal((task.d, task.d))
        else:
            raise ConfigError(f"init.theta must be 'identity' or 'random', got {theta_kind!r}")
        init = InitConfig.normalized(frac * sigma_bound(constant_set(task, lam)), theta)

    sgd = None
    if kind in ("train-sgd", "multilayer"):
        sgd = SgdConfig(batch_size=values["sgd.batch_size"], step_size=values["sgd.step_size"],
                        steps=values["sgd.steps"], optimizer_kind=values["sgd.optimizer_kind"],
                        moment_decays=(values["sgd.beta1"], values["sgd.beta2"]),
                        weight_decay=values["sgd.weight_decay"], seed=seed, decay_to=values["sgd.decay_to"])
    if kind == "baselines":
        if not values["baselines.gammas"]:
            raise ConfigError("baselines.gammas must be non-empty")
        if not 0 < values["baselines.forgetting"] <= 1:
            raise ConfigError("baselines.forgetting must lie in (0, 1]")
    if kind == "multilayer" and values["multilayer.max_layers"] < 1:
        raise ConfigError("multilayer.max_layers must be >= 1")
    return ExperimentSpec(kind=kind, task=task, values=values, seed=int(seed), out_path=out_path,
                          overridden=overridden, test=test, init=init, sgd=sgd, lambdas=lambdas)


# experiment bodies: each returns (header, rows, check) where check is (ok, message) or None


def _constants(spec):
    cfg = spec.task
    rows, worst = [], 0.0
    for lam in spec.lambdas:
        d1, d2, d3, d4 = scalar_constants(cfg, lam)
        rows.append([lam, cfg.gamma, cfg.n, cfg.d, cfg.sigma_w2, cfg.sigma_e2, d1, d2, d3, d4])
        for closed, direct in ((d1, d1_direct(cfg, lam)), (d2, d2_direct(cfg, lam)), (d3, d3_direct(cfg, lam))):
            worst = max(worst, abs(closed - direct) / max(abs(direct), 1e-300))
    check = (worst <= 1e-9, f"closed vs direct max relative difference {worst:.3e}")
    return ["lam", "gamma", "n", "d", "sw2", "se2", "D1", "D2", "D3", "D4"], rows, check


def _sweep(spec):
    cfg = spec.task
    sweep = lambda_sweep_theoretical(cfg, spec.lambdas)
    rows, mc = [], []
    for lam, theory in sweep.rows():
        rp = closed_form_optimum(constant_set(cfg, lam))
        # common random numbers across lambda
        mean, se = mc_error_estimate(rp, cfg, lam, spec.trials, spec.seed)
        rows.append([lam, theory, mean, se])
        mc.append(mean)
    lambdas = list(spec.lambdas)
    i_theory = lambdas.index(sweep.argmin)
    i_mc = int(np.argmin(mc))
    ok = abs(i_theory - i_mc) <= 1
    check = (ok, f"theory argmin {sweep.argmin}, MC argmin {lambdas[i_mc]}")
    return ["lambda", "theory_error", "mc_error", "mc_stderr"], rows, check


def _flow(spec):
    cs = constant_set(spec.task, spec.values["lam"])
    alpha = pl_constant(cs, spec.init)
    t_end = spec.values["flow.t_end"] or 60.0 / alpha
    traj = gradient_flow(init_from_assumption(spec.init, cs), cs, t_end,
                         record_every=spec.values["flow.record_every"])
    target = float(np.linalg.norm(cs.d1 * np.linalg.inv(cs.lambda_tilde)))
    rel = traj.residuals[-1] / target
    ok = rel <= 1e-8 and np.all(traj.loss_gaps <= np.exp(-alpha * traj.times) * traj.loss_gaps[0] * (1 + 1e-9) + 1e-15)
    return ["t", "loss_gap", "residual", "balancedness"], traj.rows(), (bool(ok), f"final relative residual {rel:.3e}")


def _sgd(spec):
    cfg, lam = spec.task, spec.values["lam"]
    cs = constant_set(cfg, lam)
    p0 = GlaParams.gaussian(cfg.d, lam, keyed_rng(spec.seed, 11), spec.values["sgd.init_scale"])
    res = sgd_train(p0, cfg, lam, spec.sgd, cs)
    mean, se = mc_error_params(res.params, cfg, spec.values["sgd.heldout"], spec.seed + 1)
    target = 0.5 * training_error(cs)
    ratio = geometric_decay_ratio(res.trajectory.loss_gaps)
    ok = abs(0.5 * mean - target) <= 3 * 0.5 * se and ratio < 1
    msg = f"held-out half MSE {0.5 * mean:.6g} +- {0.5 * se:.2g} vs {target:.6g}; decay ratio {ratio:.4g}"
    return ["t", "loss_gap", "residual", "balancedness"], res.trajectory.rows(), (bool(ok), msg)


def _mc_error(spec):
    cfg, lam, test = spec.task, spec.values["lam"], spec.test
    cs = constant_set(cfg, lam)
    rp = closed_form_optimum(cs)
    theory = testing_error(cs, test)
    tcfg = test.task(cfg.d)
    mean, se = mc_squared_error(lambda b: predict_reduced_batch(rp, b, test.lam_bar), tcfg, spec.trials, spec.seed)
    z = (mean - theory) / se
    row = [test.m, test.gamma_bar, test.lam_bar, theory, mean, se, z]
    return (["m", "gamma_bar", "lam_bar", "theory_error", "mc_error", "mc_stderr", "z"], [row],
            (abs(z) <= 3, f"z = {z:.3f}"))


def _baselines(spec):
    v = spec.values
    rows = []
    means = {"lms": [], "rls": []}
    for gamma in v["baselines.gammas"]:
        cfg = spec.task.replace(gamma=gamma)
        runs = (("lms", v["baselines.mu"], ab.lms_track(cfg, v["baselines.mu"], v["baselines.length"],
                                                          spec.trials, spec.seed)),
                ("rls", v["baselines.forgetting"],
                 ab.rls_track(cfg, v["baselines.forgetting"], v["baselines.length"], spec.trials, spec.seed,
                              delta=v["baselines.delta"])))
        for algo, param, res in runs:
            rows.append([algo, gamma, param, res.steady_state_mean, res.stderr, res.diverged_count,
                         res.all_step_mean])
            means[algo].append(res.steady_state_mean)
    order = np.argsort(v["baselines.gammas"])
    ok = all(np.all(np.diff(np.asarray(m)[order]) >= 0) for m in means.values())
    return (["algo", "gamma", "param", "steady_state_mean", "stderr", "diverged_count", "all_step_mean"], rows,
            (bool(ok), "steady-state error non-decreasing in gamma" if ok else "steady-state error not monotone"))


def _multilayer(spec):
    cfg, v = spec.task, spec.values
    rows = []
    for depth in range(1, v["multilayer.max_layers"] + 1):
        rng = keyed_rng(spec.seed, 13, depth)
        layers = [GlaParams.gaussian(cfg.d, v["multilayer.lam"], rng, v["sgd.init_scale"]) for _ in range(depth)]
        res = sgd_train_stack(layers, cfg, spec.sgd)
        mean, se = mc_error_stack(res.layers, cfg, spec.trials, spec.seed + 1)
        rows.append([depth, float(res.batch_losses[-1]), mean, se])
    ok = all(b[2] <= a[2] + 3 * math.hypot(a[3], b[3]) for a, b in zip(rows, rows[1:]))
    return (["layers", "final_batch_loss", "heldout_error", "heldout_stderr"], rows,
            (ok, "deeper stacks no worse within noise" if ok else "a deeper stack did worse"))


RUNNERS = {"constants": _constants, "sweep-lambda": _sweep, "train-flow": _flow, "train-sgd": _sgd,
           "mc-error": _mc_error, "baselines": _baselines, "multilayer": _multilayer}


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def render_csv(spec: ExperimentSpec, header, rows, timestamp: str | None = None) -> str:
    stamp = timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    manifest = {"spec": spec.echo(), "seed": spec.seed, "sha256": spec.content_hash(),
                "overridden": list(spec.overridden), "timestamp": stamp}
    buf = io.StringIO()
    buf.write("# " + json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    buf.write(",".join(header) + "\n")
    for row in rows:
        if len(row) != len(header):
            raise ValueError("row width does not match header")
        buf.write(",".join(format_value(x) for x in row) + "\n")
    return buf.getvalue()


def run(spec: ExperimentSpec):
    """Run ``spec``; returns ``(csv_text, check)`` with ``check = (ok, message)``."""
    header, rows, check = RUNNERS[spec.kind](spec)
    return render_csv(spec, header, rows), check


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gla-icl", description=__doc__.splitlines()[0])
    parser.add_argument("kind", choices=KINDS)
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--out", help="write CSV here instead of stdout")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--check", action="store_true", help="exit 3 if the experiment's check fails")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = parse_config(args.kind, args.config, args.overrides, args.seed, args.out)
        text, (ok, message) = run(spec)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.check:
        print(f"check {'passed' if ok else 'FAILED'}: {message}", file=sys.stderr)
        if not ok:
            return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
