from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prfpp import closedform, nash
from prfpp.errors import RangeError, ValidationError
from prfpp.forward import oracle_objective
from prfpp.market import AgentPreferences, AgentSpec, CommonNoiseParams, MarketPeriodParams
from prfpp.nash import (
    BestResponseInputs,
    NonConvergenceReport,
    best_response,
    best_response_iteration,
    best_response_residual,
    best_response_value_factor,
    homogeneous_equilibrium,
    homogeneous_fixed_point_map,
    response_coefficients,
    two_agent_equilibrium,
    two_agent_joint_probs,
)

from .conftest import agents, markets, p_cns, prefs

# Frozen from the first run of the solvers below.
HOMOGENEOUS = {
    1: (1.4318331263583002, 2.166666666666667, 0.9316723291987569),
    2: (1.084228467166605, 2.182878669595137, 0.9694669115138198),
    3: (1.0030692323236772, 2.1867009690107966, 0.9764626056001581),
    5: (0.9463913140856396, 2.1893660084595967, 0.9809106976445247),
    10: (0.9079122291552486, 2.191171135563797, 0.9837220981406519),
}


def _direct_minimum(inp: BestResponseInputs, pi: float) -> float:
    """A1 e^{-g pi (u-1)} + A2 e^{-g pi (d-1)} evaluated directly."""
    c = response_coefficients(inp)
    m = inp.me.market
    g = inp.me.gamma * (1 - inp.me.theta / inp.n_agents)
    return c.a1 * math.exp(-g * pi * (m.u - 1)) + c.a2 * math.exp(-g * pi * (m.d - 1))


def test_single_agent_is_merton(bench_agent, cn):
    inp = BestResponseInputs(bench_agent, (), cn, 1)
    # theta/N scales own wealth by (1 - theta) when alone
    expected = closedform.merton(bench_agent.gamma * (1 - bench_agent.theta), bench_agent.market)
    assert best_response(inp) == pytest.approx(expected, rel=1e-14)


def test_coefficient_exponents_give_the_minimum(bench_agent, cn):
    inp = BestResponseInputs(bench_agent, ((bench_agent, 0.7),), cn, 2)
    c = response_coefficients(inp)
    q = bench_agent.market.q
    z = (1 - q) * c.a1 / (q * c.a2)
    assert c.b1 == pytest.approx(z ** (-(1 - q)), rel=1e-13)
    assert c.b2 == pytest.approx(z**q, rel=1e-13)
    value = best_response_value_factor(inp)
    assert value == pytest.approx(c.a1 * c.b1 + c.a2 * c.b2, rel=1e-13)
    assert value == pytest.approx(_direct_minimum(inp, best_response(inp)), rel=1e-13)
    assert all(x > 0 for x in (c.a1, c.a2, c.b1, c.b2, *c.c_bull, *c.c_bear))


@given(c=p_cns, data=st.data())
def test_best_response_is_a_minimum(c, data):
    cn = CommonNoiseParams(c)
    me = data.draw(agents(c))
    opp = data.draw(agents(c))
    pi_opp = data.draw(st.floats(-3, 3))
    inp = BestResponseInputs(me, ((opp, pi_opp),), cn, 2)
    pi = best_response(inp)
    best = _direct_minimum(inp, pi)
    for h in (1e-3, -1e-3, 0.1, -0.1):
        assert _direct_minimum(inp, pi + h) > best * (1 - 1e-13)


def test_best_response_matches_grid_objective(shorting_pair, cn):
    a1, a2 = shorting_pair
    inp = BestResponseInputs(a1, ((a2, -0.5394),), cn, 2)
    pi = best_response(inp)
    grid = np.linspace(pi - 0.01, pi + 0.01, 2001)
    vals = oracle_objective(inp, grid)
    assert abs(grid[np.argmax(vals)] - pi) <= 1e-5


def test_inputs_validate(bench_agent, cn):
    with pytest.raises(ValidationError, match="n_agents"):
        BestResponseInputs(bench_agent, ((bench_agent, 0.0),), cn, 3)


def test_overflowing_opponent_raises_range_error(bench_agent, cn):
    inp = BestResponseInputs(bench_agent, ((bench_agent, 1e6),), cn, 2)
    with pytest.raises(RangeError):
        best_response(inp)


@pytest.mark.parametrize("n", sorted(HOMOGENEOUS))
def test_homogeneous_frozen(n, bench_prefs, bench_market, cn):
    sol = homogeneous_equilibrium(n, bench_prefs, bench_market, cn)
    pi, y, factor = HOMOGENEOUS[n]
    assert sol.strategies == pytest.approx((pi,) * n, rel=1e-12)
    assert sol.fixed_point_y == pytest.approx(y, rel=1e-12)
    assert sol.update_factors[0] == pytest.approx(factor, rel=1e-12)
    assert sol.residual < 1e-12


@pytest.mark.parametrize("n", [2, 3, 5, 50])
def test_homogeneous_is_mutual_best_response(n, bench_prefs, bench_market, cn):
    sol = homogeneous_equilibrium(n, bench_prefs, bench_market, cn)
    agent = AgentSpec(bench_prefs, bench_market)
    assert best_response_residual([agent] * n, cn, sol.strategies) < 1e-10
    y = sol.fixed_point_y
    assert homogeneous_fixed_point_map(y, n, bench_prefs, bench_market, cn) == pytest.approx(y, rel=1e-12)


def test_homogeneous_agrees_with_other_solvers(bench_agent, bench_prefs, bench_market, cn):
    two = two_agent_equilibrium(bench_agent, bench_agent, cn)
    assert two.strategies == pytest.approx((HOMOGENEOUS[2][0],) * 2, abs=1e-13)
    it = best_response_iteration([bench_agent] * 5, cn)
    assert it.experimental and it.fixed_point_y is None
    assert it.strategies == pytest.approx((HOMOGENEOUS[5][0],) * 5, abs=1e-11)


@given(c=p_cns, m=st.data(), p=prefs(), n=st.integers(2, 200))
def test_homogeneous_fixed_point_property(c, m, p, n):
    cn = CommonNoiseParams(c)
    market = m.draw(markets(c))
    sol = homogeneous_equilibrium(n, p, market, cn)
    y = sol.fixed_point_y
    assert y > 0
    assert abs(homogeneous_fixed_point_map(y, n, p, market, cn) - y) <= 1e-10 * max(1.0, y)


def test_shorting_frozen(shorting_pair, cn):
    sol = two_agent_equilibrium(*shorting_pair, cn)
    assert sol.strategies == pytest.approx((-0.00972082204523495, -0.5393995859009226), abs=1e-12)
    assert sol.fixed_point_y == pytest.approx(0.9912894190219517, rel=1e-12)
    assert sol.update_factors == pytest.approx((1.1001827431014821, 0.9575272121780525), rel=1e-12)
    assert sol.residual < 1e-12
    assert sol.strategies[0] < 0 < shorting_pair[0].market.p - shorting_pair[0].market.q


def test_joint_probs_frozen(shorting_pair, cn):
    jp = two_agent_joint_probs(*shorting_pair, cn)
    assert (jp.p11, jp.p01, jp.p10, jp.p00) == pytest.approx((0.1944, 0.1616, 0.3096, 0.3344), abs=1e-15)
    assert jp.p11 + jp.p01 + jp.p10 + jp.p00 == pytest.approx(1.0, abs=1e-15)


def test_heterogeneous_pair_frozen(bench_agent, cn):
    b = AgentSpec(AgentPreferences(2.0, 0.7), MarketPeriodParams.from_regimes(1.15, 0.95, 0.65, 0.3, cn))
    sol = two_agent_equilibrium(bench_agent, b, cn)
    assert sol.strategies == pytest.approx((1.1223202156908052, 4.439685907631122), rel=1e-11)


@given(c=p_cns, data=st.data())
def test_two_agent_is_mutual_best_response(c, data):
    cn = CommonNoiseParams(c)
    a1, a2 = data.draw(agents(c)), data.draw(agents(c))
    try:
        sol = two_agent_equilibrium(a1, a2, cn)
    except RangeError:
        return  # strategies beyond the exponent guard
    assert best_response_residual([a1, a2], cn, sol.strategies) < 1e-9


def test_two_agent_independent_stocks(cn):
    a = AgentSpec(AgentPreferences(3.0, 0.4), MarketPeriodParams.regime_free(1.2, 0.9, 0.6))
    b = AgentSpec(AgentPreferences(2.0, 0.7), MarketPeriodParams.regime_free(1.15, 0.95, 0.55))
    sol = two_agent_equilibrium(a, b, cn)
    assert sol.strategies == pytest.approx(closedform.independent_stocks_nash([a, b]), abs=1e-12)


def test_two_agent_decoupled_when_second_ignores_first(bench_agent, cn):
    b = AgentSpec(AgentPreferences(2.0, 0.0), bench_agent.market)
    sol = two_agent_equilibrium(bench_agent, b, cn)
    assert sol.fixed_point_y is None
    assert sol.strategies[1] == pytest.approx(closedform.merton(2.0, bench_agent.market), rel=1e-14)
    assert best_response_residual([bench_agent, b], cn, sol.strategies) < 1e-13


def test_iteration_frozen(bench_agent, shorting_pair, cn):
    b = AgentSpec(AgentPreferences(2.0, 0.7), MarketPeriodParams.from_regimes(1.15, 0.95, 0.65, 0.3, cn))
    sol = best_response_iteration([bench_agent, b, shorting_pair[0]], cn)
    assert sol.strategies == pytest.approx((1.0174599631683348, 3.7470365233003022, 0.12553150411218036), rel=1e-10)
    assert sol.residual < 1e-11


def test_iteration_matches_two_agent_solver(shorting_pair, cn):
    it = best_response_iteration(list(shorting_pair), cn)
    direct = two_agent_equilibrium(*shorting_pair, cn)
    assert it.strategies == pytest.approx(direct.strategies, abs=1e-11)


def test_iteration_reports_non_convergence(bench_agent, shorting_pair, cn):
    out = best_response_iteration([bench_agent, shorting_pair[1], shorting_pair[0]], cn, max_iter=1)
    assert isinstance(out, NonConvergenceReport)
    assert not out.converged and out.iterations == 1 and len(out.history) == 2


def test_iteration_needs_two_agents(bench_agent, cn):
    with pytest.raises(ValidationError):
        best_response_iteration([bench_agent], cn)


def test_homogeneous_rejects_bad_n(bench_prefs, bench_market, cn):
    with pytest.raises(ValidationError):
        homogeneous_equilibrium(0, bench_prefs, bench_market, cn)
    with pytest.raises(ValidationError):
        homogeneous_fixed_point_map(-1.0, 2, bench_prefs, bench_market, cn)


def test_competition_raises_the_symmetric_position(bench_market, cn):
    # With theta = 0 every agent holds the Merton amount.
    sol = homogeneous_equilibrium(4, AgentPreferences(3.0, 0.0), bench_market, cn)
    assert sol.strategies[0] == pytest.approx(closedform.merton(3.0, bench_market), rel=1e-12)
    assert HOMOGENEOUS[10][0] > sol.strategies[0]


def test_nash_module_has_no_hidden_state(bench_prefs, bench_market, cn):
    a = nash.homogeneous_equilibrium(3, bench_prefs, bench_market, cn)
    b = nash.homogeneous_equilibrium(3, bench_prefs, bench_market, cn)
    assert a == b
