import csv
import io
import json

import pytest

from gla_icl.bench_cli import ExperimentSpec, main, parse_config
from gla_icl.task_gen import ConfigError


def _run(args, capsys):
    code = main(args)
    out, err = capsys.readouterr()
    return code, out, err


def _body(text):
    lines = text.splitlines()
    assert lines[0].startswith("# ")
    return lines[1:], json.loads(lines[0][2:])


def _table(text):
    body, _ = _body(text)
    rows = list(csv.reader(io.StringIO("\n".join(body))))
    assert len({len(r) for r in rows}) == 1
    return rows[0], rows[1:]


def test_constants_unit_case(capsys):
    code, out, _ = _run(["constants", "--set", "lam=1", "--set", "task.gamma=1", "--set", "task.n=3",
                         "--set", "task.sigma_e2=1"], capsys)
    assert code == 0
    header, rows = _table(out)
    assert header == ["lam", "gamma", "n", "d", "sw2", "se2", "D1", "D2", "D3", "D4"]
    assert float(rows[0][header.index("D1")]) == 9.0


def test_defaults_applied():
    spec = parse_config("constants")
    assert (spec.task.d, spec.task.n, spec.task.sigma_w2, spec.task.sigma_e2) == (10, 100, 1.0, 0.01)
    assert isinstance(spec, ExperimentSpec) and spec.lambdas == (0.9,)


def test_empty_lambdas_rejected(capsys):
    code, _, err = _run(["sweep-lambda", "--set", "lambdas="], capsys)
    assert code == 1 and "lambdas" in err
    with pytest.raises(ConfigError):
        parse_config("sweep-lambda", overrides=["lambdas=0.5,1.2"])


def test_unknown_and_malformed_keys(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("task.gama = 0.9\n")
    code, _, err = _run(["constants", "--config", str(cfg)], capsys)
    assert code == 1 and "task.gama" in err
    code, _, err = _run(["constants", "--set", "task.n=ten"], capsys)
    assert code == 1 and "task.n" in err
    code, _, err = _run(["constants", "--set", "novalue"], capsys)
    assert code == 1


def test_flag_beats_file_and_is_recorded(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\ntask.d = 4   # trailing comment\ntask.n=5\n")
    code, out, _ = _run(["constants", "--config", str(cfg), "--set", "task.d=6"], capsys)
    assert code == 0
    _, manifest = _body(out)
    assert manifest["overridden"] == ["task.d"]
    assert manifest["spec"]["task.d"] == 6 and manifest["spec"]["task.n"] == 5
    header, rows = _table(out)
    assert rows[0][header.index("d")] == "6"


def test_flags_without_file_are_listed_as_overridden(capsys):
    code, out, _ = _run(["constants", "--set", "task.n=5", "--set", "lam=0.9"], capsys)
    assert code == 0
    assert _body(out)[1]["overridden"] == ["lam", "task.n"]


def test_bodies_are_byte_identical_and_written_to_file(tmp_path, capsys):
    out_a, out_b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["mc-error", "--set", "trials=2000", "--set", "task.n=20", "--seed", "3"]
    assert _run(args + ["--out", str(out_a)], capsys)[0] == 0
    assert _run(args + ["--out", str(out_b)], capsys)[0] == 0
    a, b = out_a.read_text(), out_b.read_text()
    assert a.splitlines()[1:] == b.splitlines()[1:]
    ma, mb = _body(a)[1], _body(b)[1]
    assert ma["sha256"] == mb["sha256"] and ma["seed"] == 3
    other = tmp_path / "c.csv"
    _run(["mc-error", "--set", "trials=2000", "--set", "task.n=20", "--seed", "4", "--out", str(other)], capsys)
    assert _body(other.read_text())[1]["sha256"] != ma["sha256"]


def test_floats_use_seventeen_digits(capsys):
    _, out, _ = _run(["constants", "--set", "lam=0.3"], capsys)
    header, rows = _table(out)
    value = rows[0][header.index("D1")]
    assert float(value) == float(format(float(value), ".17g"))
    assert len(value.replace(".", "").replace("-", "").lstrip("0").split("e")[0]) >= 15


def test_mc_error_check_passes(capsys):
    code, out, err = _run(["mc-error", "--set", "trials=20000", "--check"], capsys)
    assert code == 0 and "passed" in err
    header, rows = _table(out)
    assert header == ["m", "gamma_bar", "lam_bar", "theory_error", "mc_error", "mc_stderr", "z"]
    assert abs(float(rows[0][-1])) <= 3


def test_numerical_failure_exit_code(capsys):
    code, _, err = _run(["mc-error", "--set", "task.sigma_w2=0", "--set", "task.sigma_e2=0",
                         "--set", "trials=10"], capsys)
    assert code == 2 and "numerical" in err


def test_failed_check_exit_code(capsys):
    code, out, err = _run(["train-flow", "--set", "task.d=2", "--set", "task.n=5", "--set", "flow.t_end=0.01",
                           "--check"], capsys)
    assert code == 3 and "FAILED" in err
    header, _ = _table(out)
    assert header == ["t", "loss_gap", "residual", "balancedness"]


def test_train_flow_converges(capsys):
    code, out, _ = _run(["train-flow", "--set", "task.d=2", "--set", "task.n=10", "--check"], capsys)
    assert code == 0


def test_baselines_small(capsys):
    code, out, _ = _run(["baselines", "--set", "trials=20", "--set", "baselines.length=50",
                         "--set", "baselines.gammas=0.8,0.9"], capsys)
    assert code == 0
    header, rows = _table(out)
    assert header[:6] == ["algo", "gamma", "param", "steady_state_mean", "stderr", "diverged_count"]
    assert [r[0] for r in rows] == ["lms", "rls", "lms", "rls"]


def test_sweep_and_sgd_and_multilayer_small(capsys):
    code, out, _ = _run(["sweep-lambda", "--set", "lambdas=0.5,0.9", "--set", "trials=500",
                         "--set", "task.n=10"], capsys)
    assert code == 0 and len(_table(out)[1]) == 2
    code, out, _ = _run(["train-sgd", "--set", "task.d=2", "--set", "task.n=5", "--set", "sgd.steps=5",
                         "--set", "sgd.batch_size=50", "--set", "sgd.heldout=200"], capsys)
    assert code == 0 and len(_table(out)[1]) == 5
    code, out, _ = _run(["multilayer", "--set", "task.d=2", "--set", "task.n=5", "--set", "sgd.steps=3",
                         "--set", "sgd.batch_size=20", "--set", "trials=100"], capsys)
    assert code == 0
    header, rows = _table(out)
    assert [r[0] for r in rows] == ["1", "2"]
