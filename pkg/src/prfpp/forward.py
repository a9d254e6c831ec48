"""Multi-period forward performance processes and their exact verification.

Each agent's utility at time ``t`` is ``U_t(x) = -exp(-gamma x) / F_t``
where ``F_t`` is the running product of one-period value factors.  The
martingale check enumerates every joint outcome of the regime and the
stocks, so it is exact but limited to small trees.
"""

from __future__ import annotations

import itertools
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
from scipy.special import logsumexp

from . import nash
from .errors import SolverError, ValidationError
from .market import AgentPreferences, AgentSpec, CommonNoiseParams, MarketPeriodParams, validate
from .mfg import MfgSolution, SampledPopulation, g_factor, mfe_strategy, solve_mfg_fixed_point

MAX_SOURCES = 4
MAX_HORIZON = 3
RELATIVE_BUMPS = (0.1, -0.1, 0.5, -0.5)
ABSOLUTE_BUMPS = (1.0, -1.0)


@dataclass(frozen=True)
class Period:
    markets: tuple[MarketPeriodParams, ...]
    cn: CommonNoiseParams


@dataclass(frozen=True)
class ScenarioPath:
    periods: tuple[Period, ...]
    agents: tuple[AgentPreferences, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "periods", tuple(self.periods))
        object.__setattr__(self, "agents", tuple(self.agents))
        problems = []
        for t, period in enumerate(self.periods, start=1):
            if len(period.markets) != len(self.agents):
                problems.append(f"period {t}: {len(period.markets)} markets for {len(self.agents)} agents")
            for i, m in enumerate(period.markets):
                problems += [f"period {t}, agent {i}: {v}" for v in validate(m, period.cn)]
        if problems:
            raise ValidationError(problems, "ScenarioPath")

    @property
    def horizon(self) -> int:
        return len(self.periods)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def specs(self, t: int) -> list[AgentSpec]:
        """Agent specs in force during period ``t`` (1-based)."""
        return [AgentSpec(a, m) for a, m in zip(self.agents, self.periods[t - 1].markets)]

    @classmethod
    def constant(cls, specs: Sequence[AgentSpec], cn: CommonNoiseParams, horizon: int) -> ScenarioPath:
        period = Period(tuple(s.market for s in specs), cn)
        return cls((period,) * horizon, tuple(s.prefs for s in specs))


@dataclass(frozen=True)
class ForwardProcess:
    gamma: tuple[float, ...]
    cumulative_factors: tuple[tuple[float, ...], ...]
    """``cumulative_factors[i][t]``; index 0 is the initial datum with factor 1."""

    @property
    def horizon(self) -> int:
        return len(self.cumulative_factors[0]) - 1 if self.cumulative_factors else 0


def _period_factors(eq: nash.NashSolution | MfgSolution) -> list[float]:
    if isinstance(eq, MfgSolution):
        return [float(g) for g in eq.g_factors]
    return [float(f) for f in eq.update_factors]


def build_prfpp(path: ScenarioPath, equilibria: Sequence[nash.NashSolution | MfgSolution]) -> ForwardProcess:
    if len(equilibria) != path.horizon:
        raise ValidationError(f"{len(equilibria)} equilibria for a horizon of {path.horizon}")
    cumulative = [[1.0] for _ in path.agents]
    for t, eq in enumerate(equilibria, start=1):
        factors = _period_factors(eq)
        if len(factors) != path.n_agents:
            raise ValidationError(f"period {t}: {len(factors)} factors for {path.n_agents} agents")
        for i, f in enumerate(factors):
            if not f > 0:
                raise ValidationError(f"period {t}, agent {i}: factor {f!r} is not positive")
            cumulative[i].append(cumulative[i][-1] * f)
    return ForwardProcess(tuple(a.gamma for a in path.agents), tuple(tuple(c) for c in cumulative))


def evaluate_utility(fp: ForwardProcess, i: int, t: int, x: float | np.ndarray) -> float | np.ndarray:
    if not 0 <= i < len(fp.gamma):
        raise IndexError(f"agent index {i} out of range")
    if not 0 <= t <= fp.horizon:
        raise IndexError(f"time {t} outside [0, {fp.horizon}]")
    return -np.exp(-fp.gamma[i] * np.asarray(x)) / fp.cumulative_factors[i][t]


@dataclass(frozen=True)
class OutcomeTree:
    """All joint outcomes of one period.

    ``ups[k, i]`` tells whether stock ``i`` moves up in atom ``k``.
    """

    regime: np.ndarray
    ups: np.ndarray
    prob: np.ndarray

    @property
    def size(self) -> int:
        return int(self.prob.size)


def outcome_tree(markets: Sequence[MarketPeriodParams], cn: CommonNoiseParams) -> OutcomeTree:
    n = len(markets)
    combos = np.array(list(itertools.product((1, 0), repeat=n + 1)), dtype=bool)
    regime, ups = combos[:, 0], combos[:, 1:]
    pb = np.array([m.p_bull for m in markets])
    pr = np.array([m.p_bear for m in markets])
    bull = np.where(ups, pb, 1.0 - pb).prod(axis=1)
    bear = np.where(ups, pr, 1.0 - pr).prod(axis=1)
    prob = np.where(regime, cn.p_cn * bull, (1.0 - cn.p_cn) * bear)
    return OutcomeTree(regime, ups, prob)


def _excess(markets: Sequence[MarketPeriodParams], ups: np.ndarray) -> np.ndarray:
    u = np.array([m.u for m in markets])
    d = np.array([m.d for m in markets])
    return np.where(ups, u, d) - 1.0


def _relative(wealth: np.ndarray, theta: np.ndarray) -> np.ndarray:
    n = wealth.shape[-1]
    return wealth - (theta / n) * wealth.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Per-period solvers

def solve_nash_period(specs: Sequence[AgentSpec], cn: CommonNoiseParams,
                      tol: float = nash.Y_TOL) -> nash.NashSolution:
    """Pick the matching finite-agent solver for one period."""
    n = len(specs)
    if n == 1:
        inp = nash.BestResponseInputs(specs[0], (), cn, 1)
        return nash.NashSolution((nash.best_response(inp),), None, (nash.best_response_value_factor(inp),))
    if all(s == specs[0] for s in specs):
        return nash.homogeneous_equilibrium(n, specs[0].prefs, specs[0].market, cn, tol)
    if n == 2:
        return nash.two_agent_equilibrium(specs[0], specs[1], cn, tol)
    out = nash.best_response_iteration(specs, cn, tol)
    if isinstance(out, nash.NonConvergenceReport):
        raise SolverError("best-response iteration did not converge", {"iterations": out.iterations})
    return out


def solve_mfg_period(spec: AgentSpec, cn: CommonNoiseParams,
                     population: SampledPopulation | None = None) -> MfgSolution:
    """Mean-field equilibrium seen by ``spec``.

    Without ``population`` the agent plays against copies of itself.  With
    one, the fixed point comes from the population and the returned
    strategy and G-factor are those of ``spec``.
    """
    if population is None:
        population = SampledPopulation.from_agents([spec], cn.p_cn, degenerate_ok=spec.market.degenerate_ok)
        return solve_mfg_fixed_point(population)
    if population.p_cn != cn.p_cn:
        raise ValidationError(f"population p_cn={population.p_cn} but period p_cn={cn.p_cn}")
    sol = solve_mfg_fixed_point(population)
    pi = mfe_strategy(spec, cn.p_cn, sol.y_star)
    g = g_factor(spec, cn.p_cn, pi, sol.y_bull, sol.y_bear)
    return replace(sol, strategies=np.array([pi]), g_factors=np.array([g]))


# ---------------------------------------------------------------------------
# Exact martingale check

@dataclass(frozen=True)
class MartingaleReport:
    passed: bool
    max_residual: float
    n_equalities: int
    n_perturbations: int
    violations: tuple[str, ...]
    factors: ForwardProcess = field(repr=False)


def _bumps(pi: float) -> list[float]:
    out = [r * pi for r in RELATIVE_BUMPS if r * pi != 0.0]
    return out + list(ABSOLUTE_BUMPS)


def martingale_check_exact(path: ScenarioPath, solver: Literal["nash", "mfg"] = "nash",
                           t: int | None = None, tol: float = 1e-9,
                           populations: Sequence[SampledPopulation] | None = None) -> MartingaleReport:
    """Verify the forward martingale and supermartingale conditions exactly.

    For every node of the outcome tree, every agent and every period, the
    conditional expectation of next-period utility at the equilibrium
    strategy must equal current utility, and each strategy in a fixed
    perturbation battery must give strictly less.

    In ``mfg`` mode ``populations`` gives the network for each period; by
    default the representative agent faces copies of itself.
    """
    n, horizon = path.n_agents, path.horizon
    sources = n + 1 if solver == "nash" else 2
    if sources > MAX_SOURCES or horizon > MAX_HORIZON:
        raise ValidationError(
            f"exact tree too large: 2^{sources * horizon} = {2 ** (sources * horizon)} path atoms "
            f"(limits: {MAX_SOURCES} sources per period, horizon {MAX_HORIZON})"
        )
    if solver == "mfg" and n != 1:
        raise ValidationError("mfg mode verifies a single representative agent")
    if populations is not None and (solver != "mfg" or len(populations) != horizon):
        raise ValidationError("populations needs mfg mode and one population per period")
    periods = range(1, horizon + 1) if t is None else [t]
    if t is not None and not 1 <= t <= horizon:
        raise ValidationError(f"period {t} outside [1, {horizon}]")

    equilibria = []
    for s in range(1, horizon + 1):
        specs, cn = path.specs(s), path.periods[s - 1].cn
        if solver == "nash":
            equilibria.append(solve_nash_period(specs, cn))
        else:
            pop = None if populations is None else populations[s - 1]
            equilibria.append(solve_mfg_period(specs[0], cn, pop))
    fp = build_prfpp(path, equilibria)
    gamma = np.array([a.gamma for a in path.agents])
    theta = np.array([a.theta for a in path.agents])

    if solver == "nash":
        runner = _NashTree
    else:
        runner = _MfgTree
    state = runner.initial(path)
    worst, n_eq, n_pert, violations = 0.0, 0, 0, []
    for s in range(1, horizon + 1):
        period = path.periods[s - 1]
        tree = outcome_tree(period.markets, period.cn) if solver == "nash" else None
        eq = equilibria[s - 1]
        if s in periods:
            for i in range(n):
                prev_u = -np.exp(-gamma[i] * runner.relative(state, theta)[:, i]) / fp.cumulative_factors[i][s - 1]
                pi_star = float(eq.strategies[i])
                for bump in [0.0, *_bumps(pi_star)]:
                    expect = runner.expectation(state, path, s, tree, eq, i, pi_star + bump,
                                                gamma[i], theta, fp.cumulative_factors[i][s])
                    if bump == 0.0:
                        rel = np.abs(expect - prev_u) / np.abs(prev_u)
                        worst = max(worst, float(rel.max()))
                        n_eq += rel.size
                    else:
                        n_pert += expect.size
                        if not np.all(expect < prev_u):
                            violations.append(f"period {s}, agent {i}: bump {bump:+g} not strictly worse")
        state = runner.advance(state, path, s, tree, eq)
    if worst >= tol:
        violations.insert(0, f"equality residual {worst:.3e} >= {tol:g}")
    return MartingaleReport(not violations, worst, n_eq, n_pert, tuple(violations), fp)


class _NashTree:
    """Node state: wealth matrix of shape (nodes, N)."""

    @staticmethod
    def initial(path: ScenarioPath) -> np.ndarray:
        return np.array([[a.x0 for a in path.agents]], dtype=float)

    @staticmethod
    def relative(state: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return _relative(state, theta)

    @staticmethod
    def expectation(state, path, s, tree, eq, i, pi_i, gamma_i, theta, factor) -> np.ndarray:
        markets = path.periods[s - 1].markets
        pis = np.array(eq.strategies, dtype=float)
        pis[i] = pi_i
        gains = _excess(markets, tree.ups) * pis                    # (atoms, N)
        nxt = state[:, None, :] + gains[None, :, :]                 # (nodes, atoms, N)
        rel = _relative(nxt, theta)[..., i]
        return -(tree.prob * np.exp(-gamma_i * rel)).sum(axis=1) / factor

    @staticmethod
    def advance(state, path, s, tree, eq) -> np.ndarray:
        gains = _excess(path.periods[s - 1].markets, tree.ups) * np.array(eq.strategies)
        return (state[:, None, :] + gains[None, :, :]).reshape(-1, state.shape[1])


class _MfgTree:
    """Node state: columns (own wealth, population average wealth)."""

    @staticmethod
    def initial(path: ScenarioPath) -> np.ndarray:
        x0 = path.agents[0].x0
        return np.array([[x0, x0]], dtype=float)

    @staticmethod
    def relative(state: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return (state[:, 0] - theta[0] * state[:, 1])[:, None]

    @staticmethod
    def _atoms(path, s, eq):
        m = path.periods[s - 1].markets[0]
        p_cn = path.periods[s - 1].cn.p_cn
        regime = np.array([1, 1, 0, 0], dtype=bool)
        up = np.array([1, 0, 1, 0], dtype=bool)
        prob = np.where(regime, p_cn, 1 - p_cn) * np.where(
            up, np.where(regime, m.p_bull, m.p_bear), np.where(regime, 1 - m.p_bull, 1 - m.p_bear)
        )
        excess = np.where(up, m.u, m.d) - 1.0
        avg_gain = np.where(regime, eq.y_bull, eq.y_bear)
        return prob, excess, avg_gain

    @classmethod
    def expectation(cls, state, path, s, tree, eq, i, pi_i, gamma_i, theta, factor) -> np.ndarray:
        prob, excess, avg_gain = cls._atoms(path, s, eq)
        own = state[:, 0:1] + pi_i * excess[None, :]
        avg = state[:, 1:2] + avg_gain[None, :]
        rel = own - theta[0] * avg
        return -(prob * np.exp(-gamma_i * rel)).sum(axis=1) / factor

    @classmethod
    def advance(cls, state, path, s, tree, eq) -> np.ndarray:
        _, excess, avg_gain = cls._atoms(path, s, eq)
        own = state[:, 0:1] + float(eq.strategies[0]) * excess[None, :]
        avg = state[:, 1:2] + avg_gain[None, :]
        return np.stack([own.reshape(-1), avg.reshape(-1)], axis=1)


# ---------------------------------------------------------------------------
# Brute-force single-period oracle

def _oracle_sums(inp: nash.BestResponseInputs) -> tuple[float, float, float]:
    """Log-weights of the own-up and own-down atoms and the own exposure scale."""
    specs = [inp.me, *(a for a, _ in inp.others)]
    tree = outcome_tree([s.market for s in specs], inp.cn)
    n = inp.n_agents
    k = inp.me.gamma * inp.me.theta / n
    opp_pis = np.array([pi for _, pi in inp.others], dtype=float)
    opp_gain = (_excess([s.market for s in specs[1:]], tree.ups[:, 1:]) * opp_pis).sum(axis=1)
    weights = np.log(tree.prob) + k * opp_gain
    own_up = tree.ups[:, 0]
    scale = inp.me.gamma * (1.0 - inp.me.theta / n)
    return float(logsumexp(weights[own_up])), float(logsumexp(weights[~own_up])), scale


def oracle_objective(inp: nash.BestResponseInputs, grid: np.ndarray) -> np.ndarray:
    """Exact expected utility of relative wealth at zero wealth, for each grid strategy."""
    log_up, log_down, scale = _oracle_sums(inp)
    m = inp.me.market
    pis = np.asarray(grid, dtype=float)
    log_neg = np.logaddexp(log_up - scale * pis * (m.u - 1.0), log_down - scale * pis * (m.d - 1.0))
    return -np.exp(log_neg)


def grid_search_best_response_oracle(inp: nash.BestResponseInputs, lo: float = -10.0,
                                     hi: float = 10.0, step: float = 1e-4) -> tuple[float, float]:
    if not lo < hi or not step > 0:
        raise ValidationError("need lo < hi and step > 0")
    grid = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    values = oracle_objective(inp, grid)
    k = int(np.argmax(values))
    return float(grid[k]), float(values[k])


def is_unimodal(values: np.ndarray) -> bool:
    """True when the sequence rises (weakly) to one peak and then falls (weakly)."""
    d = np.sign(np.diff(np.asarray(values, dtype=float)))
    d = d[d != 0]
    falling = np.flatnonzero(d < 0)
    return falling.size == 0 or not np.any(d[falling[0]:] > 0)


# ---------------------------------------------------------------------------
# Simulation

@dataclass(frozen=True, eq=False)
class WealthSimulation:
    wealth: np.ndarray          # (paths, T+1, N)
    relative: np.ndarray        # (paths, T+1, N)
    mean: np.ndarray            # (T+1, N)
    variance: np.ndarray
    relative_mean: np.ndarray
    relative_variance: np.ndarray


def simulate_wealth_paths(path: ScenarioPath, equilibria: Sequence[nash.NashSolution],
                          n_paths: int, seed: int) -> WealthSimulation:
    if n_paths < 1:
        raise ValidationError("n_paths must be >= 1")
    if len(equilibria) != path.horizon:
        raise ValidationError(f"{len(equilibria)} equilibria for a horizon of {path.horizon}")
    rng = np.random.Generator(np.random.Philox(seed))
    n = path.n_agents
    theta = np.array([a.theta for a in path.agents])
    wealth = np.empty((n_paths, path.horizon + 1, n))
    wealth[:, 0, :] = [a.x0 for a in path.agents]
    for s, (period, eq) in enumerate(zip(path.periods, equilibria), start=1):
        bull = rng.random(n_paths) < period.cn.p_cn
        pb = np.array([m.p_bull for m in period.markets])
        pr = np.array([m.p_bear for m in period.markets])
        up = rng.random((n_paths, n)) < np.where(bull[:, None], pb, pr)
        gain = _excess(period.markets, up) * np.asarray(eq.strategies, dtype=float)
        wealth[:, s, :] = wealth[:, s - 1, :] + gain
    rel = _relative(wealth, theta)
    return WealthSimulation(
        wealth, rel,
        wealth.mean(axis=0), wealth.var(axis=0, ddof=1) if n_paths > 1 else np.zeros_like(wealth[0]),
        rel.mean(axis=0), rel.var(axis=0, ddof=1) if n_paths > 1 else np.zeros_like(rel[0]),
    )
