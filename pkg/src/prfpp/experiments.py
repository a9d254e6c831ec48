"""Scenario drivers: solve, sweep, verify.

These turn a :class:`~prfpp.scenario.ScenarioFile` into plain records
(dicts and CSV rows) so the command line stays a thin shell.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, TextIO

import numpy as np

from . import closedform, forward, mfg, nash
from .errors import PrfppError, SolverError, ValidationError
from .market import (
    AgentPreferences,
    AgentSpec,
    CommonNoiseParams,
    MarketPeriodParams,
    mean_preserving_up_prob,
    volatility_down_level,
    with_expected_return,
    with_skew,
    with_volatility,
)
from .scenario import ScenarioFile

CSV_COLUMNS = (
    "scenario", "scenario_hash", "seed", "samples", "sweep", "target", "parameter",
    "value", "network_mean", "strategy", "merton", "competition", "y_star",
    "population_mean_strategy", "iterations", "expected", "error",
)
CHECKS = ("martingale", "contraction", "n-to-mfe", "directions")

# Which population column summarizes each sweep parameter.
_NETWORK_COLUMN = {
    "theta": "theta", "gamma": "gamma", "volatility": "u",
    "expected_return": "u", "skew_up": "u", "skew_down": "d",
}


def _context(sf: ScenarioFile, exc: SolverError) -> SolverError:
    return SolverError(f"scenario {sf.name!r}: {exc}", exc.diagnostics)


def _population(sf: ScenarioFile, overrides: dict | None = None) -> mfg.SampledPopulation:
    spec = sf.population_spec(overrides)
    return mfg.sample_population(spec, sf.solver["samples"], sf.solver["seed"])


def _solve_population(sf: ScenarioFile, pop: mfg.SampledPopulation) -> mfg.MfgSolution:
    try:
        return mfg.solve_mfg_fixed_point(pop, sf.solver["tol"], sf.solver["max_iter"])
    except SolverError as exc:
        raise _context(sf, exc) from exc


def run_solve(sf: ScenarioFile) -> dict[str, Any]:
    """Dispatch to the solver for the scenario mode and return a JSON-ready record."""
    start = time.perf_counter()
    tol = sf.solver["tol"]
    rec: dict[str, Any] = {"scenario": sf.name, "scenario_hash": sf.hash, "mode": sf.mode}
    try:
        if sf.mode == "nash-homogeneous":
            (agent,) = sf.agent_specs()
            sol = nash.homogeneous_equilibrium(sf.data["n_agents"], agent.prefs, agent.market, sf.cn, tol)
            rec.update(_nash_fields(sol))
        elif sf.mode == "nash-2agent":
            a1, a2 = sf.agent_specs()
            sol = nash.two_agent_equilibrium(a1, a2, sf.cn, tol)
            rec.update(_nash_fields(sol))
            rec["expected_excess_returns"] = [
                a.market.p * (a.market.u - 1) + (1 - a.market.p) * (a.market.d - 1) for a in (a1, a2)
            ]
        elif sf.mode == "mfg":
            pop = _population(sf)
            sol = _solve_population(sf, pop)
            agent = sf.fixed_agent()
            p_cn = sf.data["p_cn"]
            pi = mfg.mfe_strategy(agent, p_cn, sol.y_star)
            merton, competition = mfg.mfe_decomposition(agent, p_cn, sol.y_star)
            rec.update(
                y_star=sol.y_star,
                strategy=pi,
                merton=merton,
                competition=competition,
                g_factor=mfg.g_factor(agent, p_cn, pi, sol.y_bull, sol.y_bear),
                iterations=sol.iterations,
                residual=sol.residual,
                contraction_estimate=sol.contraction_estimate,
                samples=pop.size,
                seed=pop.seed,
                p_cn=p_cn,
                population_mean_strategy=float(np.mean(sol.strategies)),
                nonpositive_excess_agents=sol.nonpositive_excess,
            )
        elif sf.mode == "single-stock":
            mk = sf.data["market"]
            m = MarketPeriodParams.regime_free(mk["u"], mk["d"], mk["p"])
            prefs = [AgentPreferences(a["gamma"], a["theta"], a["x0"]) for a in sf.data["agents"]]
            agg = sf.data.get("aggregates") or {
                "theta_bar": math.fsum(p.theta for p in prefs) / len(prefs),
                "inv_gamma_bar": math.fsum(1 / p.gamma for p in prefs) / len(prefs),
            }
            rec.update(
                strategies=closedform.single_stock_nash(closedform.SingleStockInputs(m, tuple(prefs))),
                mean_field_strategies=[
                    closedform.single_stock_mfe(m, p, agg["theta_bar"], agg["inv_gamma_bar"]) for p in prefs
                ],
                aggregates=agg,
            )
        elif sf.mode == "independent":
            agents = sf.agent_specs()
            rec.update(
                strategies=closedform.independent_stocks_nash(agents, sf.data["n_agents"]),
                mean_field_strategies=[closedform.independent_stocks_mfe(a) for a in agents],
            )
    except SolverError as exc:
        raise _context(sf, exc) from exc
    rec["wall_time_s"] = time.perf_counter() - start
    return rec


def _nash_fields(sol: nash.NashSolution) -> dict[str, Any]:
    return {
        "strategies": list(sol.strategies),
        "y_star": sol.fixed_point_y,
        "update_factors": list(sol.update_factors),
        "iterations": sol.iterations,
        "residual": sol.residual,
    }


# ---------------------------------------------------------------------------
# Sweeps

def transform_agent(agent: AgentSpec, parameter: str, value: float) -> AgentSpec:
    """Set one characteristic of the fixed agent; market moves keep the mean return."""
    m, prefs = agent.market, agent.prefs
    if parameter == "theta":
        return AgentSpec(dataclasses.replace(prefs, theta=value), m)
    if parameter == "gamma":
        return AgentSpec(dataclasses.replace(prefs, gamma=value), m)
    if parameter == "volatility":
        return AgentSpec(prefs, with_volatility(m, value))
    if parameter == "expected_return":
        return AgentSpec(prefs, with_expected_return(m, value))
    if parameter == "skew_up":
        return AgentSpec(prefs, with_skew(m, u_new=value))
    if parameter == "skew_down":
        return AgentSpec(prefs, with_skew(m, d_new=value))
    raise ValidationError(f"unknown sweep parameter {parameter!r}")


def transform_network(pop: mfg.SampledPopulation, parameter: str, shift: float) -> mfg.SampledPopulation:
    """Shift one parameter of every sampled agent by the same amount.

    Reusing the same base draws at each grid point gives common random
    numbers across the sweep.
    """
    if parameter in ("theta", "gamma"):
        return pop.replace(**{parameter: getattr(pop, parameter) + shift})
    u, d, p = pop.u, pop.d, pop.p
    if parameter == "volatility":
        u2 = u + shift
        return pop.replace(u=u2, d=volatility_down_level(u, d, p, u2))
    if parameter == "expected_return":
        return pop.replace(u=u + shift)
    if parameter in ("skew_up", "skew_down"):
        u2, d2 = (u + shift, d) if parameter == "skew_up" else (u, d + shift)
        dp = mean_preserving_up_prob(u, d, p, u2, d2) - p
        return pop.replace(u=u2, d=d2, p_bull=pop.p_bull + dp, p_bear=pop.p_bear + dp)
    raise ValidationError(f"unknown sweep parameter {parameter!r}")


def _row(sf: ScenarioFile, sweep: dict, value: float, **fields: Any) -> dict[str, Any]:
    row = dict.fromkeys(CSV_COLUMNS, "")
    row.update(
        scenario=sf.name, scenario_hash=sf.hash, seed=sf.solver["seed"], samples=sf.solver["samples"],
        sweep=sweep["name"], target=sweep["target"], parameter=sweep["parameter"],
        value=value, expected=sweep["expected"],
    )
    row.update(fields)
    return row


def _point_row(sf: ScenarioFile, sweep: dict, value: float, agent: AgentSpec,
               sol: mfg.MfgSolution, pop: mfg.SampledPopulation) -> dict[str, Any]:
    p_cn = sf.data["p_cn"]
    merton, competition = mfg.mfe_decomposition(agent, p_cn, sol.y_star)
    return _row(
        sf, sweep, value,
        network_mean=float(np.mean(getattr(pop, _NETWORK_COLUMN[sweep["parameter"]]))),
        strategy=mfg.mfe_strategy(agent, p_cn, sol.y_star), merton=merton, competition=competition,
        y_star=sol.y_star, population_mean_strategy=float(np.mean(sol.strategies)),
        iterations=sol.iterations,
    )


def _sweep_rows(sf: ScenarioFile, sweep: dict, threads: int) -> list[dict[str, Any]]:
    base = _population(sf, sweep.get("network"))
    agent = sf.fixed_agent(sweep.get("agent"))
    parameter = sweep["parameter"]
    shared = _solve_population(sf, base) if sweep["target"] == "agent" else None

    def point(value: float) -> dict[str, Any]:
        try:
            if shared is not None:
                return _point_row(sf, sweep, value, transform_agent(agent, parameter, value), shared, base)
            pop = transform_network(base, parameter, value)
            return _point_row(sf, sweep, value, agent, _solve_population(sf, pop), pop)
        except PrfppError as exc:
            return _row(sf, sweep, value, error=str(exc).replace("\n", " "))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(point, sweep["values"]))
    return [point(v) for v in sweep["values"]]


def run_sweep(sf: ScenarioFile, threads: int = 1, names: list[str] | None = None) -> list[dict[str, Any]]:
    """One CSV row per grid point of every sweep block, in file order."""
    if sf.mode != "mfg":
        raise ValidationError(f"sweeps need mode 'mfg', scenario {sf.name!r} has {sf.mode!r}")
    if not sf.sweeps:
        raise ValidationError(f"scenario {sf.name!r} has no sweep block")
    unknown = sorted(set(names or ()) - {s["name"] for s in sf.sweeps})
    if unknown:
        raise ValidationError(f"unknown sweep(s) {', '.join(unknown)} in scenario {sf.name!r}")
    rows = []
    for sweep in sf.sweeps:
        if names and sweep["name"] not in names:
            continue
        rows.extend(_sweep_rows(sf, sweep, max(1, threads)))
    return rows


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_csv(rows: list[dict[str, Any]], out: TextIO) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def rows_to_csv(rows: list[dict[str, Any]]) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def sweep_direction_ok(rows: list[dict[str, Any]]) -> bool:
    """Strict monotonicity of the strategy column in the declared direction."""
    if not rows or any(r["error"] for r in rows):
        return False
    s = np.array([float(r["strategy"]) for r in rows])
    d = np.diff(s)
    return bool(np.all(d > 0) if rows[0]["expected"] == "increasing" else np.all(d < 0))


# ---------------------------------------------------------------------------
# Verification

def _martingale(sf: ScenarioFile) -> dict[str, Any]:
    horizon = sf.data["horizon"]
    populations = None
    if sf.mode == "nash-homogeneous":
        (agent,) = sf.agent_specs()
        path = forward.ScenarioPath.constant([agent] * sf.data["n_agents"], sf.cn, horizon)
        solver = "nash"
    elif sf.mode == "nash-2agent":
        path = forward.ScenarioPath.constant(sf.agent_specs(), sf.cn, horizon)
        solver = "nash"
    elif sf.mode == "mfg":
        path = forward.ScenarioPath.constant([sf.fixed_agent()], sf.cn, horizon)
        solver = "mfg"
        populations = mfg.sample_population_path(
            sf.population_spec(), sf.solver["samples"], sf.solver["seed"], horizon)
    elif sf.mode == "independent":
        path = forward.ScenarioPath.constant(sf.agent_specs(), CommonNoiseParams(0.5), horizon)
        solver = "nash"
    else:
        raise ValidationError(f"martingale check is not defined for mode {sf.mode!r}")
    rep = forward.martingale_check_exact(path, solver, populations=populations)
    return {
        "passed": rep.passed, "max_residual": rep.max_residual, "equalities": rep.n_equalities,
        "perturbations": rep.n_perturbations, "violations": list(rep.violations),
    }


def _contraction(sf: ScenarioFile) -> dict[str, Any]:
    if sf.mode != "mfg":
        raise ValidationError("contraction check needs mode 'mfg'")
    pop = _population(sf)
    lo, hi, num = sf.data["verify"]["slope_grid"]
    grid = np.linspace(lo, hi, int(num))
    slopes = [mfg.mfg_map_slope(float(y), pop) for y in grid]
    sol = _solve_population(sf, pop)
    ok = all(0 < s < 1 for s in slopes)
    return {
        "passed": ok, "min_slope": min(slopes), "max_slope": max(slopes),
        "iterations": sol.iterations, "contraction_estimate": sol.contraction_estimate,
    }


def _limit(sf: ScenarioFile) -> dict[str, Any]:
    if sf.mode == "nash-homogeneous":
        (agent,) = sf.agent_specs()
    elif sf.mode == "mfg":
        agent = sf.fixed_agent()
    else:
        raise ValidationError(f"n-to-mfe check is not defined for mode {sf.mode!r}")
    pi_mfe, rows = mfg.homogeneous_limit_check(agent.prefs, agent.market, sf.cn, sf.data["verify"]["limit_n"])
    gaps = [r.gap for r in rows]
    return {
        "passed": all(b < a for a, b in zip(gaps, gaps[1:])),
        "pi_mfe": pi_mfe,
        "table": [{"n": r.n, "pi_n": r.pi_n, "gap": r.gap} for r in rows],
    }


def _directions(sf: ScenarioFile, threads: int = 1) -> dict[str, Any]:
    rows = run_sweep(sf, threads)
    by_sweep: dict[str, list] = {}
    for r in rows:
        by_sweep.setdefault(r["sweep"], []).append(r)
    results = {name: sweep_direction_ok(rs) for name, rs in by_sweep.items()}
    return {"passed": all(results.values()), "sweeps": results}


def run_verify(sf: ScenarioFile, check: str, threads: int = 1) -> dict[str, Any]:
    """Run one named check; failures are report content, never exceptions."""
    runners = {
        "martingale": _martingale, "contraction": _contraction,
        "n-to-mfe": _limit, "directions": lambda s: _directions(s, threads),
    }
    if check not in runners:
        raise ValidationError(f"unknown check {check!r}; choose from {', '.join(CHECKS)}")
    start = time.perf_counter()
    try:
        out = runners[check](sf)
    except ValidationError as exc:
        out = {"passed": None, "skipped": str(exc)}
    except PrfppError as exc:
        out = {"passed": False, "error": str(exc)}
    out = {"check": check, "scenario": sf.name, "scenario_hash": sf.hash, **out}
    out["wall_time_s"] = time.perf_counter() - start
    return out
