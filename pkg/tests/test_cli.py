from __future__ import annotations

import csv
import io
import json

import pytest

from prfpp import cli
from prfpp.experiments import CSV_COLUMNS
from prfpp.scenario import bundled_scenarios


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_list(capsys):
    code, out, _ = run(capsys, "list")
    assert code == cli.EXIT_OK
    assert out.split() == list(bundled_scenarios())


def test_solve_json(capsys):
    code, out, _ = run(capsys, "solve", "--scenario", "shorting_2agent")
    rec = json.loads(out)
    assert code == 0 and rec["mode"] == "nash-2agent"
    assert rec["strategies"][0] == pytest.approx(-0.00972082204523495, rel=1e-11)


def test_solve_is_deterministic_and_writes_file(capsys, tmp_path):
    target = tmp_path / "out.json"
    assert run(capsys, "solve", "--scenario", "benchmark_mfg", "--samples", "500", "--out", str(target))[0] == 0
    first = json.loads(target.read_text())
    _, out, _ = run(capsys, "solve", "--scenario", "benchmark_mfg", "--samples", "500")
    second = json.loads(out)
    first.pop("wall_time_s"), second.pop("wall_time_s")
    assert first == second


def test_seed_override_changes_population(capsys):
    a = json.loads(run(capsys, "solve", "--scenario", "benchmark_mfg", "--samples", "500")[1])
    b = json.loads(run(capsys, "solve", "--scenario", "benchmark_mfg", "--samples", "500", "--seed", "9")[1])
    assert a["y_star"] != b["y_star"] and a["scenario_hash"] != b["scenario_hash"]


def test_sweep_csv(capsys):
    code, out, _ = run(capsys, "sweep", "--scenario", "figure1", "--samples", "500",
                       "--sweep", "own_theta", "--threads", "2")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == list(CSV_COLUMNS)
    assert {r["sweep"] for r in rows} == {"own_theta"}
    strategies = [float(r["strategy"]) for r in rows]
    assert strategies == sorted(strategies)


def test_warnings_are_logged_once(capsys):
    _, _, err = run(capsys, "sweep", "--scenario", "figure1", "--sweep", "own_theta")
    assert err.count("nonpositive expected excess return") == 1


def test_verify_and_report(capsys):
    code, out, _ = run(capsys, "verify", "--scenario", "homogeneous_benchmark", "--check", "martingale")
    assert code == 0 and json.loads(out)["passed"] is True
    code, out, _ = run(capsys, "report", "--scenario", "homogeneous_benchmark")
    assert code == 0
    assert "PASS  martingale" in out and "PASS  n-to-mfe" in out and "FAIL" not in out


def test_show_round_trips(capsys, tmp_path):
    _, out, _ = run(capsys, "show", "--scenario", "shorting_2agent")
    f = tmp_path / "copy.yaml"
    f.write_text(out)
    a = json.loads(run(capsys, "solve", "--scenario", str(f))[1])
    b = json.loads(run(capsys, "solve", "--scenario", "shorting_2agent")[1])
    assert a["strategies"] == b["strategies"]


@pytest.mark.parametrize(
    "argv",
    [
        ["solve", "--scenario", "no_such_scenario"],
        ["solve", "--scenario", "benchmark_mfg", "--samples", "0"],
        ["sweep", "--scenario", "shorting_2agent"],
        ["sweep", "--scenario", "figure1", "--sweep", "nope"],
    ],
)
def test_validation_exit_code(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == cli.EXIT_VALIDATION
    assert err.strip()


def test_invalid_file_exit_code(capsys, tmp_path):
    f = tmp_path / "bad.yaml"
    f.write_text("name: bad\nmode: nash-2agent\np_cn: 1.5\nagents: []\n")
    code, _, err = run(capsys, "solve", "--scenario", str(f))
    assert code == cli.EXIT_VALIDATION
    assert "bad.yaml" in err


def test_solver_failure_exit_code(capsys):
    code, _, err = run(capsys, "solve", "--scenario", "benchmark_mfg", "--max-iter", "1")
    assert code == cli.EXIT_SOLVER
    assert err.strip()


def test_verify_failure_exit_code(capsys, monkeypatch):
    monkeypatch.setattr(cli, "run_verify", lambda sf, check, threads=1: {"check": check, "passed": False})
    code, out, _ = run(capsys, "verify", "--scenario", "shorting_2agent", "--check", "martingale")
    assert code == cli.EXIT_VERIFY and json.loads(out)["passed"] is False


def test_usage_error_exits_two(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["solve"])
    assert exc.value.code == 2
