from __future__ import annotations

import pytest
from hypothesis import settings
from hypothesis import strategies as st

from prfpp.market import AgentPreferences, AgentSpec, CommonNoiseParams, MarketPeriodParams
from prfpp.mfg import benchmark_population_spec, sample_population

settings.register_profile("prfpp", max_examples=60, deadline=None)
settings.load_profile("prfpp")

P_CN = 0.6


@pytest.fixture(scope="session")
def cn() -> CommonNoiseParams:
    return CommonNoiseParams(P_CN)


@pytest.fixture(scope="session")
def bench_market(cn) -> MarketPeriodParams:
    return MarketPeriodParams.from_regimes(1.2, 0.9, 0.6, 0.4, cn)


@pytest.fixture(scope="session")
def bench_prefs() -> AgentPreferences:
    return AgentPreferences(3.0, 0.4)


@pytest.fixture(scope="session")
def bench_agent(bench_prefs, bench_market) -> AgentSpec:
    return AgentSpec(bench_prefs, bench_market)


@pytest.fixture(scope="session")
def shorting_pair(cn) -> tuple[AgentSpec, AgentSpec]:
    prefs = AgentPreferences(10.0, 0.9)
    return (
        AgentSpec(prefs, MarketPeriodParams.from_regimes(1.1, 0.9, 0.6, 0.36, cn)),
        AgentSpec(prefs, MarketPeriodParams.from_regimes(1.1, 0.9, 0.46, 0.2, cn)),
    )


@pytest.fixture(scope="session")
def bench_population():
    return sample_population(benchmark_population_spec(P_CN), 10_000, 0)


# Hypothesis strategies over valid inputs. Ranges stay away from the
# boundaries where exp(.) of the best-response exponents overflows.

p_cns = st.floats(0.05, 0.95)


@st.composite
def markets(draw, p_cn: float | None = None):
    c = draw(p_cns) if p_cn is None else p_cn
    u = draw(st.floats(1.02, 1.5))
    d = draw(st.floats(0.5, 0.98))
    p_bear = draw(st.floats(0.02, 0.9))
    p_bull = draw(st.floats(p_bear + 0.01, 0.98))
    return MarketPeriodParams.from_regimes(u, d, p_bull, p_bear, c)


@st.composite
def prefs(draw, theta_min: float = 0.0):
    return AgentPreferences(draw(st.floats(0.5, 10.0)), draw(st.floats(theta_min, 1.0)))


@st.composite
def agents(draw, p_cn: float):
    return AgentSpec(draw(prefs()), draw(markets(p_cn)))
