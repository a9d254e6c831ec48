"""Closed-form equilibria for the two extreme correlation structures.

All agents trading one shared stock, or each agent trading a stock that
is independent of every other one.  Both reduce to the Merton log-odds
``ln(p (1 - q) / ((1 - p) q)) / (u - d)`` times a preference weight.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .market import AgentPreferences, AgentSpec, MarketPeriodParams
from .mfg import SampledPopulation


def merton_log_odds(m: MarketPeriodParams) -> float:
    """``ln(p (1-q) / ((1-p) q)) / (u - d)``, the Merton strategy times ``gamma``."""
    q = m.q
    return (math.log(m.p) - math.log1p(-m.p) + math.log1p(-q) - math.log(q)) / (m.u - m.d)


def merton(gamma: float, m: MarketPeriodParams) -> float:
    return merton_log_odds(m) / gamma


@dataclass(frozen=True)
class SingleStockInputs:
    m: MarketPeriodParams
    agents: tuple[AgentPreferences, ...] = ()
    theta_bar: float | None = None
    inv_gamma_bar: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.agents:
            if sum(a.theta for a in self.agents) / len(self.agents) >= 1.0:
                raise ValidationError("mean theta must be < 1 for the finite formula")
        elif self.theta_bar is None or self.inv_gamma_bar is None:
            raise ValidationError("supply agents or both aggregates (theta_bar, inv_gamma_bar)")
        if self.theta_bar is not None and not self.theta_bar < 1.0:
            raise ValidationError("theta_bar must be < 1")
        if self.inv_gamma_bar is not None and not self.inv_gamma_bar > 0.0:
            raise ValidationError("inv_gamma_bar must be > 0")


def population_aggregates(pop: SampledPopulation) -> tuple[float, float]:
    """``(mean theta, mean 1/gamma)`` of a sampled population."""
    return math.fsum(pop.theta) / pop.size, math.fsum(1.0 / pop.gamma) / pop.size


def single_stock_nash(inp: SingleStockInputs) -> list[float]:
    agents = inp.agents
    if not agents:
        raise ValidationError("single_stock_nash needs the finite list of agents")
    n = len(agents)
    theta_mean = math.fsum(a.theta for a in agents) / n
    if theta_mean >= 1.0:
        raise ValidationError("mean theta equals 1: the finite formula is singular")
    inv_gamma_sum = math.fsum(1.0 / a.gamma for a in agents)
    coupling = inv_gamma_sum / (n * (1.0 - theta_mean))
    k = merton_log_odds(inp.m)
    return [k * (1.0 / a.gamma + a.theta * coupling) for a in agents]


def single_stock_mfe(m: MarketPeriodParams, prefs: AgentPreferences,
                     theta_bar: float, inv_gamma_bar: float) -> float:
    if not theta_bar < 1.0:
        raise ValidationError("theta_bar must be < 1")
    return merton_log_odds(m) * (1.0 / prefs.gamma + prefs.theta * inv_gamma_bar / (1.0 - theta_bar))


def single_stock_mfe_gradient(m: MarketPeriodParams, prefs: AgentPreferences,
                              theta_bar: float, inv_gamma_bar: float) -> dict[str, float]:
    """Analytic partial derivatives of :func:`single_stock_mfe`.

    Keys are ``theta``, ``gamma``, ``theta_bar`` and ``inv_gamma_bar``.
    """
    k = merton_log_odds(m)
    lead = 1.0 - theta_bar
    return {
        "theta": k * inv_gamma_bar / lead,
        "gamma": -k / prefs.gamma**2,
        "theta_bar": k * prefs.theta * inv_gamma_bar / lead**2,
        "inv_gamma_bar": k * prefs.theta / lead,
    }


def independent_stocks_nash(agents: Sequence[AgentSpec], n: int | None = None) -> list[float]:
    n = len(agents) if n is None else n
    if n < 1:
        raise ValidationError("N must be >= 1")
    out = []
    for a in agents:
        scale = 1.0 - a.theta / n
        if scale <= 0:
            raise ValidationError("theta equals N")
        out.append(merton_log_odds(a.market) / (a.gamma * scale))
    return out


def independent_stocks_mfe(agent: AgentSpec) -> float:
    return merton(agent.gamma, agent.market)


def independent_stocks_mfe_array(pop: SampledPopulation) -> np.ndarray:
    p, q = pop.p, pop.q
    k = (np.log(p) - np.log1p(-p) + np.log1p(-q) - np.log(q)) / (pop.u - pop.d)
    return k / pop.gamma
