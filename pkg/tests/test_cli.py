import json
import os
import subprocess
import sys

import pytest

from stochctl import cli


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = cli.main([*argv, "--out", str(out)])
    return code, out


def test_rank_pass_writes_outputs(tmp_path, capsys):
    code, out = run(tmp_path, "rank")
    assert code == cli.EXIT_PASS
    assert sorted(os.listdir(out)) == ["basis.csv", "metrics.csv", "report.json", "timing.txt"]
    doc = json.loads((out / "report.json").read_text())
    assert doc["passed"] and doc["config"]["command"] == "rank"
    assert "PASS rank" in capsys.readouterr().out


def test_failed_assertion_exits_1(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"params": {"expect_rank": 1}}))
    code, out = run(tmp_path, "rank", "--config", str(cfg))
    assert code == cli.EXIT_FAIL
    doc = json.loads((out / "report.json").read_text())
    assert not doc["passed"]


@pytest.mark.parametrize("argv", [
    ["no-such-command"],
    ["rank", "--seed", "-1"],
    ["rank", "--tol", "nan"],
    ["rank", "--bogus"],
    ["counterexamples"],
])
def test_usage_errors_exit_2(tmp_path, argv):
    code, out = run(tmp_path, *argv)
    assert code == cli.EXIT_USAGE
    assert not out.exists()


@pytest.mark.parametrize("doc", [
    "{not json",
    "[1, 2]",
    json.dumps({"extra": 1}),
    json.dumps({"command": "gramian"}),
    json.dumps({"params": {"nope": 1}}),
    json.dumps({"params": {"A": 3}}),
    json.dumps({"params": {"A": [[1.0, 2.0], [3.0]]}}),
    json.dumps({"seed": 2**64}),
])
def test_bad_config_exit_2(tmp_path, doc):
    cfg = tmp_path / "c.json"
    cfg.write_text(doc)
    code, out = run(tmp_path, "rank", "--config", str(cfg))
    assert code == cli.EXIT_USAGE
    assert not out.exists()


def test_missing_config_exit_2(tmp_path):
    code, out = run(tmp_path, "rank", "--config", str(tmp_path / "missing.json"))
    assert code == cli.EXIT_USAGE and not out.exists()


def test_resource_guard_exit_3(tmp_path):
    code, out = run(tmp_path, "mp-check", "--paths", "2", "--steps", "1000")
    assert code == cli.EXIT_GUARD
    assert not out.exists()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "tol": 1e-6}))
    code, out = run(tmp_path, "gramian", "--config", str(cfg), "--seed", "9")
    assert code == cli.EXIT_PASS
    echo = json.loads((out / "report.json").read_text())["config"]
    assert echo["seed"] == 9 and echo["tol"] == 1e-6


def test_reruns_are_byte_identical(tmp_path):
    argv = ["oracle-compare", "--instances", "15", "--seed", "4"]
    _, a = run(tmp_path, *argv, name="a")
    _, b = run(tmp_path, *argv, name="b")
    files = sorted(os.listdir(a))
    assert files == sorted(os.listdir(b))
    for f in files:
        if f != "timing.txt":
            assert (a / f).read_bytes() == (b / f).read_bytes(), f


def test_seed_changes_output(tmp_path):
    _, a = run(tmp_path, "oracle-compare", "--instances", "15", "--seed", "1", name="a")
    _, b = run(tmp_path, "oracle-compare", "--instances", "15", "--seed", "2", name="b")
    assert (a / "agreement.csv").read_bytes() != (b / "agreement.csv").read_bytes()


def test_nested_counterexample_command(tmp_path):
    code, out = run(tmp_path, "counterexamples", "eta-beta")
    assert code == cli.EXIT_PASS
    assert (out / "eta_profile.csv").exists()


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "stochctl", "stochastic-rank", "--out", str(tmp_path / "o")],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert "controllable, rank 2" in r.stdout


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as e:
        cli.build_parser().parse_args(["--help"])
    assert e.value.code == 0
    text = capsys.readouterr().out
    for name in ("rank", "heat-null-control", "carleman-verify", "counterexamples"):
        assert name in text
