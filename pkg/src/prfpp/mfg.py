"""Mean-field equilibrium over a sampled population of agent types.

The population enters the representative agent's problem only through
``y = E[pi (Delta_bull - Delta_bear)]``, the gap between the average gain
in a bull and in a bear regime.  ``y`` solves ``y = F(y)`` where ``F`` is
a contraction; conditional expectations are sample means over ``M``
sampled type vectors.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from typing import Literal

import numpy as np

from . import nash
from .errors import SolverError, ValidationError
from .market import (
    PROB_TOL,
    AgentPreferences,
    AgentSpec,
    CommonNoiseParams,
    MarketPeriodParams,
    market_violations,
    preference_violations,
)

log = logging.getLogger(__name__)

PARAMS = ("gamma", "theta", "u", "d", "p_bull", "p_bear")
DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 10_000


@dataclass(frozen=True)
class Constant:
    value: float

    @property
    def bounds(self) -> tuple[float, float]:
        return self.value, self.value

    @property
    def mean(self) -> float:
        return self.value

    @property
    def variance(self) -> float:
        return 0.0


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.lo > self.hi:
            raise ValidationError(f"Uniform support [{self.lo}, {self.hi}] is not an interval")

    @property
    def bounds(self) -> tuple[float, float]:
        return self.lo, self.hi

    @property
    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    @property
    def variance(self) -> float:
        return (self.hi - self.lo) ** 2 / 12.0


Distribution = Constant | Uniform


@dataclass(frozen=True)
class PopulationSpec:
    """Independent marginal laws for each type parameter plus a shared ``p_cn``.

    The unconditional up-probability of each agent follows from its regime
    probabilities.  Supports are checked at their corners; ``p_bull`` must
    lie above ``p_bear`` everywhere except possibly on a shared endpoint,
    and every draw is checked again after sampling.
    """

    gamma: Distribution
    theta: Distribution
    u: Distribution
    d: Distribution
    p_bull: Distribution
    p_bear: Distribution
    p_cn: float
    degenerate_ok: bool = field(default=False, compare=False)

    def violations(self) -> list[str]:
        out: list[str] = []
        g_lo, g_hi = self.gamma.bounds
        t_lo, t_hi = self.theta.bounds
        for g in (g_lo, g_hi):
            for t in (t_lo, t_hi):
                out += preference_violations(g, t)
        u_lo, u_hi = self.u.bounds
        d_lo, d_hi = self.d.bounds
        b_lo, b_hi = self.p_bull.bounds
        r_lo, r_hi = self.p_bear.bounds
        for u in (u_lo, u_hi):
            for d in (d_lo, d_hi):
                for pb in (b_lo, b_hi):
                    for pr in (r_lo, r_hi):
                        p = self.p_cn * pb + (1 - self.p_cn) * pr
                        out += market_violations(u, d, p, max(pb, pr), min(pb, pr), degenerate_ok=True)
        if not PROB_TOL <= self.p_cn <= 1 - PROB_TOL:
            out.append("p_cn must lie strictly inside (0, 1)")
        if self.degenerate_ok:
            if b_lo < r_hi:
                out.append("p_bull support must not lie below p_bear support")
        elif b_lo < r_hi or (b_lo == r_hi and b_lo == b_hi and r_lo == r_hi):
            out.append("p_bull support must lie above p_bear support")
        return sorted(set(out), key=out.index)

    def __post_init__(self) -> None:
        out = self.violations()
        if out:
            raise ValidationError(out, "PopulationSpec")

    @classmethod
    def constant(cls, agent: AgentSpec, p_cn: float, degenerate_ok: bool = False) -> PopulationSpec:
        m = agent.market
        return cls(Constant(agent.gamma), Constant(agent.theta), Constant(m.u), Constant(m.d),
                   Constant(m.p_bull), Constant(m.p_bear), p_cn, degenerate_ok)


def benchmark_population_spec(p_cn: float = 0.6) -> PopulationSpec:
    """The uniform benchmark network used by the bundled figure scenarios."""
    return PopulationSpec(
        gamma=Uniform(2.0, 4.0),
        theta=Uniform(0.2, 0.6),
        u=Uniform(1.16, 1.24),
        d=Uniform(0.86, 0.94),
        p_bull=Uniform(0.5, 0.7),
        p_bear=Uniform(0.3, 0.5),
        p_cn=p_cn,
    )


def _uniform_stream(seed: int, index: int, m: int) -> np.ndarray:
    # One Philox key per (seed, parameter): draws for one parameter do not
    # depend on the other parameters or on the order they are sampled in.
    bitgen = np.random.Philox(key=np.array([seed & 0xFFFFFFFFFFFFFFFF, index], dtype=np.uint64))
    return np.random.Generator(bitgen).random(m)


@dataclass(frozen=True, eq=False)
class SampledPopulation:
    """Structure-of-arrays population; ``agents`` builds the object view lazily."""

    gamma: np.ndarray
    theta: np.ndarray
    u: np.ndarray
    d: np.ndarray
    p_bull: np.ndarray
    p_bear: np.ndarray
    p_cn: float
    seed: int = 0
    degenerate_ok: bool = False

    def __post_init__(self) -> None:
        arrays = {}
        for name in PARAMS:
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        sizes = {a.size for a in arrays.values()}
        if len(sizes) != 1 or 0 in sizes:
            raise ValidationError("population arrays must share one nonzero length")
        self._check()

    def _check(self) -> None:
        g, t, u, d, pb, pr = (getattr(self, n) for n in PARAMS)
        p = self.p
        bad = {
            "gamma must be > 0": ~(g > 0),
            "theta must lie in [0, 1]": ~((t >= 0) & (t <= 1)),
            "u must be > 1": ~(u > 1),
            "d must lie in (0, 1)": ~((d > 0) & (d < 1)),
            "p_bull must lie strictly inside (0, 1)": ~((pb >= PROB_TOL) & (pb <= 1 - PROB_TOL)),
            "p_bear must lie strictly inside (0, 1)": ~((pr >= PROB_TOL) & (pr <= 1 - PROB_TOL)),
            "p must lie strictly inside (0, 1)": ~((p >= PROB_TOL) & (p <= 1 - PROB_TOL)),
            ("p_bull must be >= p_bear" if self.degenerate_ok else "p_bull must be > p_bear"):
                (pb < pr) if self.degenerate_ok else ~(pb > pr),
        }
        out = [f"{msg} (agents {np.flatnonzero(mask)[:5].tolist()})" for msg, mask in bad.items() if mask.any()]
        if not PROB_TOL <= self.p_cn <= 1 - PROB_TOL:
            out.append("p_cn must lie strictly inside (0, 1)")
        if out:
            raise ValidationError(out, "SampledPopulation")

    @property
    def size(self) -> int:
        return int(self.gamma.size)

    @property
    def p(self) -> np.ndarray:
        return self.p_cn * self.p_bull + (1.0 - self.p_cn) * self.p_bear

    @property
    def q(self) -> np.ndarray:
        return (1.0 - self.d) / (self.u - self.d)

    @property
    def delta_bull(self) -> np.ndarray:
        return self.p_bull * (self.u - 1.0) + (1.0 - self.p_bull) * (self.d - 1.0)

    @property
    def delta_bear(self) -> np.ndarray:
        return self.p_bear * (self.u - 1.0) + (1.0 - self.p_bear) * (self.d - 1.0)

    @property
    def excess_return(self) -> np.ndarray:
        p = self.p
        return p * (self.u - 1.0) + (1.0 - p) * (self.d - 1.0)

    @cached_property
    def agents(self) -> list[AgentSpec]:
        out = []
        for g, t, u, d, pb, pr, p in zip(*(getattr(self, n) for n in PARAMS), self.p):
            m = MarketPeriodParams(float(u), float(d), float(p), float(pb), float(pr),
                                   degenerate_ok=self.degenerate_ok)
            out.append(AgentSpec(AgentPreferences(float(g), float(t)), m))
        return out

    def replace(self, **arrays) -> SampledPopulation:
        data = {n: getattr(self, n) for n in PARAMS}
        data.update(arrays)
        data = {n: np.broadcast_to(np.asarray(v, dtype=float), (self.size,)) for n, v in data.items()}
        return SampledPopulation(**data, p_cn=self.p_cn, seed=self.seed, degenerate_ok=self.degenerate_ok)

    @classmethod
    def from_agents(cls, agents: Sequence[AgentSpec], p_cn: float, seed: int = 0,
                    degenerate_ok: bool = False) -> SampledPopulation:
        cols = {
            "gamma": [a.gamma for a in agents], "theta": [a.theta for a in agents],
            "u": [a.market.u for a in agents], "d": [a.market.d for a in agents],
            "p_bull": [a.market.p_bull for a in agents], "p_bear": [a.market.p_bear for a in agents],
        }
        return cls(**cols, p_cn=p_cn, seed=seed, degenerate_ok=degenerate_ok)


def sample_population(spec: PopulationSpec, m: int, seed: int) -> SampledPopulation:
    """Draw ``m`` i.i.d. agents; parameter ``k`` uses its own counter-based stream."""
    if m < 1:
        raise ValidationError("M must be >= 1")
    cols = {}
    for index, name in enumerate(PARAMS):
        dist = getattr(spec, name)
        if isinstance(dist, Constant):
            cols[name] = np.full(m, dist.value)
        else:
            cols[name] = dist.lo + (dist.hi - dist.lo) * _uniform_stream(seed, index, m)
    return SampledPopulation(**cols, p_cn=spec.p_cn, seed=seed, degenerate_ok=spec.degenerate_ok)


def sample_population_path(spec: PopulationSpec, m: int, seed: int, horizon: int) -> list[SampledPopulation]:
    """One i.i.d. population per period; period 1 uses ``seed`` itself."""
    return [sample_population(spec, m, seed + t) for t in range(horizon)]


def base_uniforms(seed: int, m: int) -> dict[str, np.ndarray]:
    """The raw U(0,1) draws behind :func:`sample_population`, for common random numbers."""
    return {name: _uniform_stream(seed, i, m) for i, name in enumerate(PARAMS)}


# ---------------------------------------------------------------------------
# Fixed point

@dataclass(frozen=True, eq=False)
class _Kernel:
    """Per-agent constants of ``F``, precomputed once per population."""

    weight: np.ndarray      # (Delta_bull - Delta_bear) / (gamma (u - d)) = (p_bull - p_bear) / gamma
    base: np.ndarray        # ln((1 - q) p_bull / (q (1 - p_bull)))
    c: np.ndarray           # p_bear / p_bull - (1 - p_bear) / (1 - p_bull)
    r: np.ndarray           # (1 - p_bear) / (1 - p_bull)
    rate: np.ndarray        # gamma * theta
    odds: float             # p_cn / (1 - p_cn)

    @classmethod
    def of(cls, pop: SampledPopulation) -> _Kernel:
        pb, pr, q = pop.p_bull, pop.p_bear, pop.q
        return cls(
            weight=(pop.delta_bull - pop.delta_bear) / (pop.gamma * (pop.u - pop.d)),
            base=np.log1p(-q) - np.log(q) + np.log(pb) - np.log1p(-pb),
            c=pr / pb - (1.0 - pr) / (1.0 - pb),
            r=(1.0 - pr) / (1.0 - pb),
            rate=pop.gamma * pop.theta,
            odds=pop.p_cn / (1.0 - pop.p_cn),
        )

    def _recip(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``1/(odds e^x + r)`` and ``e^x/(odds e^x + r)``, overflow-free for any sign of x."""
        pos = x >= 0
        e = np.exp(-np.abs(x))
        inv = np.where(pos, e / (self.odds + self.r * e), 1.0 / (self.odds * e + self.r))
        ex_inv = np.where(pos, 1.0 / (self.odds + self.r * e), e / (self.odds * e + self.r))
        return inv, ex_inv

    def terms(self, y: float) -> np.ndarray:
        inv, _ = self._recip(self.rate * y)
        return self.weight * (self.base + np.log1p(self.c * inv))

    def value(self, y: float) -> float:
        return math.fsum(self.terms(y)) / self.weight.size

    def slope(self, y: float, h: float) -> float:
        """Secant slope ``(F(y+h) - F(y)) / h`` without catastrophic cancellation."""
        dx = self.rate * h
        inv1, ex_inv1 = self._recip(self.rate * y)
        inv2, _ = self._recip(self.rate * (y + h))
        # c (inv2 - inv1) = -c odds expm1(dx) e^{x1} inv1 inv2
        diff = -self.c * self.odds * np.expm1(dx) * ex_inv1 * inv2
        inc = self.weight * np.log1p(diff / (1.0 + self.c * inv1))
        return math.fsum(inc) / (self.weight.size * h)


def mfg_fixed_point_map(y: float, pop: SampledPopulation) -> float:
    return _Kernel.of(pop).value(y)


def mfg_map_slope(y: float, pop: SampledPopulation, h: float = 1e-6) -> float:
    return _Kernel.of(pop).slope(y, h)


@dataclass(frozen=True, eq=False)
class MfgSolution:
    y_star: float
    strategies: np.ndarray
    g_factors: np.ndarray
    iterations: int
    residual: float
    contraction_estimate: float = math.nan
    nonpositive_excess: int = 0
    y_bull: float = math.nan
    y_bear: float = math.nan

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MfgSolution):
            return NotImplemented
        return (
            self.y_star == other.y_star
            and self.iterations == other.iterations
            and self.residual == other.residual
            and np.array_equal(self.strategies, other.strategies)
            and np.array_equal(self.g_factors, other.g_factors)
        )


def _strategies(pop: SampledPopulation, y_star: float) -> np.ndarray:
    x = pop.gamma * pop.theta * y_star
    c = pop.p_cn
    # Logs of the bracketed sums, shifted by x where e^x dominates.
    num = np.logaddexp(np.log(c * pop.p_bull) + x, np.log((1 - c) * pop.p_bear))
    den = np.logaddexp(np.log(c * (1 - pop.p_bull)) + x, np.log((1 - c) * (1 - pop.p_bear)))
    q = pop.q
    return (np.log1p(-q) - np.log(q) + num - den) / (pop.gamma * (pop.u - pop.d))


def _g_factors(pop: SampledPopulation, pi: np.ndarray, y_bull: float, y_bear: float) -> np.ndarray:
    gt = pop.gamma * pop.theta
    up = -pop.gamma * pi * (pop.u - 1.0)
    down = -pop.gamma * pi * (pop.d - 1.0)
    bull = np.logaddexp(np.log(pop.p_bull) + up, np.log1p(-pop.p_bull) + down) + gt * y_bull
    bear = np.logaddexp(np.log(pop.p_bear) + up, np.log1p(-pop.p_bear) + down) + gt * y_bear
    return np.exp(np.logaddexp(math.log(pop.p_cn) + bull, math.log1p(-pop.p_cn) + bear))


def solve_mfg_fixed_point(pop: SampledPopulation, tol: float = DEFAULT_TOL,
                          max_iter: int = DEFAULT_MAX_ITER, strict: bool = False) -> MfgSolution:
    """Banach iteration ``y <- F(y)`` from ``y = 0``.

    Agents with nonpositive expected excess return break the positivity
    guarantee for ``y``.  They are counted and logged; ``strict=True``
    rejects them instead.
    """
    bad = int(np.count_nonzero(pop.excess_return <= 0))
    if bad:
        if strict:
            raise ValidationError(f"{bad} agents have nonpositive expected excess return")
        log.warning("%d of %d agents have nonpositive expected excess return", bad, pop.size)
    kernel = _Kernel.of(pop)
    y = 0.0
    steps: list[float] = []
    for k in range(1, max_iter + 1):
        y_next = kernel.value(y)
        step = abs(y_next - y)
        steps.append(step)
        y = y_next
        if step < tol:
            break
    else:
        rate = steps[-1] / steps[-2] if len(steps) > 1 and steps[-2] > 0 else math.nan
        raise SolverError("mean-field iteration did not converge",
                          {"iterations": max_iter, "last_step": steps[-1], "contraction_estimate": rate})
    rates = [b / a for a, b in zip(steps[:-1], steps[1:]) if a > 0 and b > 0]
    contraction = max(rates) if rates else 0.0
    pi = _strategies(pop, y)
    y_bull = math.fsum(pi * pop.delta_bull) / pop.size
    y_bear = math.fsum(pi * pop.delta_bear) / pop.size
    return MfgSolution(
        y_star=y,
        strategies=pi,
        g_factors=_g_factors(pop, pi, y_bull, y_bear),
        iterations=k,
        residual=abs(kernel.value(y) - y),
        contraction_estimate=contraction,
        nonpositive_excess=bad,
        y_bull=y_bull,
        y_bear=y_bear,
    )


def mfe_strategy(agent: AgentSpec, p_cn: float, y_star: float) -> float:
    m = agent.market
    x = agent.gamma * agent.theta * y_star
    num = np.logaddexp(math.log(p_cn * m.p_bull) + x, math.log((1 - p_cn) * m.p_bear))
    den = np.logaddexp(math.log(p_cn * (1 - m.p_bull)) + x, math.log((1 - p_cn) * (1 - m.p_bear)))
    return float(math.log1p(-m.q) - math.log(m.q) + num - den) / (agent.gamma * (m.u - m.d))


def mfe_decomposition(agent: AgentSpec, p_cn: float, y_star: float) -> tuple[float, float]:
    """Split the MFE strategy into a Merton part and a competition part."""
    m = agent.market
    scale = agent.gamma * (m.u - m.d)
    merton = (math.log1p(-m.q) - math.log(m.q) + math.log(m.p) - math.log1p(-m.p)) / scale
    x = agent.gamma * agent.theta * y_star
    num = np.logaddexp(math.log(p_cn * m.p_bull) + x, math.log((1 - p_cn) * m.p_bear))
    den = np.logaddexp(math.log(p_cn * (1 - m.p_bull)) + x, math.log((1 - p_cn) * (1 - m.p_bear)))
    competition = float(math.log1p(-m.p) - math.log(m.p) + num - den) / scale
    return merton, competition


def g_factor(agent: AgentSpec, p_cn: float, pi: float, y_bull: float, y_bear: float) -> float:
    pop = SampledPopulation.from_agents([agent], p_cn, degenerate_ok=agent.market.degenerate_ok)
    return float(_g_factors(pop, np.array([pi]), y_bull, y_bear)[0])


def average_wealth_update(pop: SampledPopulation, strategies: Sequence[float] | np.ndarray,
                          regime: Literal["bull", "bear"], prev_avg: float) -> float:
    pi = np.asarray(strategies, dtype=float)
    if pi.shape != (pop.size,):
        raise ValidationError(f"expected {pop.size} strategies, got {pi.size}")
    if regime == "bull":
        drift = pop.delta_bull
    elif regime == "bear":
        drift = pop.delta_bear
    else:
        raise ValidationError(f"regime must be 'bull' or 'bear', got {regime!r}")
    return prev_avg + math.fsum(pi * drift) / pop.size


@dataclass(frozen=True)
class LimitRow:
    n: int
    pi_n: float
    gap: float


def homogeneous_limit_check(prefs: AgentPreferences, m: MarketPeriodParams, cn: CommonNoiseParams,
                            n_list: Sequence[int] = (2, 10, 100, 10_000)) -> tuple[float, list[LimitRow]]:
    """Compare N-agent symmetric equilibria with the MFE of the same agent.

    Returns the MFE strategy and one row per ``N``.
    """
    agent = AgentSpec(prefs, m)
    pop = SampledPopulation.from_agents([agent], cn.p_cn, degenerate_ok=m.degenerate_ok)
    pi_mfe = float(solve_mfg_fixed_point(pop).strategies[0])
    rows = []
    for n in n_list:
        pi_n = nash.homogeneous_equilibrium(int(n), prefs, m, cn).strategies[0]
        rows.append(LimitRow(int(n), pi_n, abs(pi_n - pi_mfe)))
    return pi_mfe, rows
