from __future__ import annotations

import csv
import io

import numpy as np
import pytest

from prfpp.errors import ValidationError
from prfpp.experiments import (
    CSV_COLUMNS,
    rows_to_csv,
    run_solve,
    run_sweep,
    run_verify,
    sweep_direction_ok,
    transform_agent,
    transform_network,
)
from prfpp.market import return_moments
from prfpp.scenario import load_scenario

SOLVE_FROZEN = {
    "shorting_2agent": ("strategies", [-0.00972082204523495, -0.5393995859009226]),
    "homogeneous_benchmark": ("strategies", [1.0030692323236772] * 3),
    "benchmark_mfg": ("strategy", 0.8735674539670747),
    "single_stock": ("strategies", [2.0344672012372405] * 2),
    "independent": ("strategies", [1.4084772931642433, 0.5375107914164795, 0.253415692567603]),
}


@pytest.mark.parametrize("name", sorted(SOLVE_FROZEN))
def test_run_solve_frozen(name):
    rec = run_solve(load_scenario(name))
    key, expected = SOLVE_FROZEN[name]
    assert rec[key] == pytest.approx(expected, rel=1e-11, abs=1e-13)
    assert rec["scenario"] == name and rec["wall_time_s"] >= 0


def test_shorting_record_reports_excess_returns():
    rec = run_solve(load_scenario("shorting_2agent"))
    assert rec["expected_excess_returns"][0] == pytest.approx(0.0008, abs=1e-15)


@pytest.fixture(scope="module")
def figure1_rows():
    return run_sweep(load_scenario("figure1").with_solver(samples=2000), threads=2)


def test_sweep_rows_shape(figure1_rows):
    assert len(figure1_rows) == 18
    assert all(set(r) == set(CSV_COLUMNS) for r in figure1_rows)
    assert {r["sweep"] for r in figure1_rows} == {"own_theta", "network_theta"}
    assert not any(r["error"] for r in figure1_rows)


def test_sweep_directions(figure1_rows):
    for name in ("own_theta", "network_theta"):
        assert sweep_direction_ok([r for r in figure1_rows if r["sweep"] == name])


def test_agent_sweep_shares_one_population(figure1_rows):
    own = [r for r in figure1_rows if r["sweep"] == "own_theta"]
    assert len({r["y_star"] for r in own}) == 1
    net = [r for r in figure1_rows if r["sweep"] == "network_theta"]
    assert len({r["y_star"] for r in net}) == len(net)


def test_threads_do_not_change_results(figure1_rows):
    serial = run_sweep(load_scenario("figure1").with_solver(samples=2000), threads=1)
    assert rows_to_csv(serial) == rows_to_csv(figure1_rows)


def test_csv_round_trips_floats(figure1_rows):
    text = rows_to_csv(figure1_rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0]) == list(CSV_COLUMNS)
    assert [float(r["strategy"]) for r in parsed] == [r["strategy"] for r in figure1_rows]


def test_sweep_filter_and_mode_checks():
    sf = load_scenario("figure1").with_solver(samples=500)
    rows = run_sweep(sf, names=["own_theta"])
    assert {r["sweep"] for r in rows} == {"own_theta"}
    with pytest.raises(ValidationError, match="unknown sweep"):
        run_sweep(sf, names=["nope"])
    with pytest.raises(ValidationError):
        run_sweep(load_scenario("shorting_2agent"))
    with pytest.raises(ValidationError, match="no sweep"):
        run_sweep(load_scenario("benchmark_mfg"))


def test_failed_points_land_in_error_column():
    sf = load_scenario("figure1").with_solver(samples=500)
    sweep = dict(sf.sweeps[0], values=[0.5, 1.5])
    sf.data["sweeps"] = [sweep]
    rows = run_sweep(sf)
    assert rows[0]["error"] == "" and "theta" in rows[1]["error"]
    assert not sweep_direction_ok(rows)


def test_transform_agent_keeps_mean(bench_agent):
    base = return_moments(bench_agent.market)[0]
    for param, value in [("volatility", 1.22), ("skew_up", 1.26), ("skew_down", 0.86)]:
        moved = transform_agent(bench_agent, param, value)
        assert return_moments(moved.market)[0] == pytest.approx(base, abs=1e-14)
    assert transform_agent(bench_agent, "theta", 0.5).theta == 0.5
    with pytest.raises(ValidationError):
        transform_agent(bench_agent, "colour", 1.0)


@pytest.mark.parametrize("param", ["volatility", "expected_return", "skew_up", "skew_down", "theta", "gamma"])
def test_transform_network_zero_shift_is_identity(param, bench_population):
    moved = transform_network(bench_population, param, 0.0)
    for name in ("gamma", "theta", "u", "d", "p_bull", "p_bear"):
        assert np.allclose(getattr(moved, name), getattr(bench_population, name), atol=1e-15)


def test_transform_network_invalid_shift_raises(bench_population):
    with pytest.raises(ValidationError, match="d must lie in"):
        transform_network(bench_population, "volatility", -0.04)


def test_run_verify_reports():
    sf = load_scenario("homogeneous_benchmark")
    mart = run_verify(sf, "martingale")
    assert mart["passed"] is True and mart["max_residual"] < 1e-9
    skip = run_verify(sf, "contraction")
    assert skip["passed"] is None and "mfg" in skip["skipped"]
    lim = run_verify(sf, "n-to-mfe")
    assert lim["passed"] and lim["table"][-1]["gap"] < 1e-3
    with pytest.raises(ValidationError):
        run_verify(sf, "nonsense")


def test_run_verify_contraction_on_benchmark():
    rep = run_verify(load_scenario("benchmark_mfg"), "contraction")
    assert rep["passed"] and 0 < rep["min_slope"] <= rep["max_slope"] < 1
