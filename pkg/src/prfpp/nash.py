"""Finite-population forward Nash equilibria.

Agent ``i`` maximizes the one-period expected CARA utility of relative
wealth ``(1 - theta/N) X_i - (theta/N) sum_{k != i} X_k`` given the other
agents' stock holdings.  Solvers here cover the single best response,
the symmetric N-agent equilibrium, the heterogeneous two-agent game and
an experimental Gauss-Seidel iteration for heterogeneous N.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import RangeError, SolverError, ValidationError
from .market import AgentPreferences, AgentSpec, CommonNoiseParams, MarketPeriodParams, validate

log = logging.getLogger(__name__)

EXP_LIMIT = 700.0
Y_TOL = 1e-12
MAX_BISECT = 200


@dataclass(frozen=True)
class BestResponseInputs:
    me: AgentSpec
    others: tuple[tuple[AgentSpec, float], ...]
    cn: CommonNoiseParams
    n_agents: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "others", tuple((a, float(s)) for a, s in self.others))
        problems = []
        if self.n_agents != 1 + len(self.others):
            problems.append(f"n_agents={self.n_agents} but {len(self.others)} opponents given")
        for i, agent in enumerate((self.me, *(a for a, _ in self.others))):
            problems += [f"agent {i}: {v}" for v in validate(agent, self.cn)]
        if problems:
            raise ValidationError(problems, "BestResponseInputs")


@dataclass(frozen=True)
class ResponseCoefficients:
    a1: float
    a2: float
    b1: float
    b2: float
    c_bull: tuple[float, ...]
    c_bear: tuple[float, ...]


@dataclass(frozen=True)
class TwoAgentJointProbs:
    """Joint up/down probabilities; the first index is agent 1's outcome."""

    p11: float
    p01: float
    p10: float
    p00: float


@dataclass(frozen=True)
class NashSolution:
    strategies: tuple[float, ...]
    fixed_point_y: float | None
    update_factors: tuple[float, ...]
    residual: float = 0.0
    iterations: int = 0
    experimental: bool = False


@dataclass(frozen=True)
class NonConvergenceReport:
    """Returned by :func:`best_response_iteration` when it runs out of sweeps."""

    iterations: int
    last_strategies: tuple[float, ...]
    history: tuple[tuple[float, ...], ...] = field(repr=False)
    last_change: float = math.nan
    converged: bool = False


def _guard(x: float, what: str) -> float:
    if not abs(x) <= EXP_LIMIT:
        raise RangeError(f"exponent {x!r} in {what} exceeds +/-{EXP_LIMIT:g}")
    return x


def _log_ratio_terms(inp: BestResponseInputs) -> tuple[float, float, list[float], list[float]]:
    """Return ``ln A1``, ``ln A2`` and per-opponent ``ln C`` for both regimes."""
    return _log_terms(inp.me, inp.others, inp.cn, inp.n_agents)


def _log_terms(me: AgentSpec, others: Sequence[tuple[AgentSpec, float]], cn: CommonNoiseParams,
               n_agents: int, multiplicity: int = 1) -> tuple[float, float, list[float], list[float]]:
    # ``multiplicity`` counts each listed opponent that many times.
    p_cn = cn.p_cn
    k = me.gamma * me.theta / n_agents
    log_c_bull, log_c_bear = [], []
    for other, pi in others:
        m = other.market
        up = _guard(k * pi * (m.u - 1.0), "opponent factor")
        down = _guard(k * pi * (m.d - 1.0), "opponent factor")
        log_c_bull.append(float(np.logaddexp(math.log(m.p_bull) + up, math.log1p(-m.p_bull) + down)))
        log_c_bear.append(float(np.logaddexp(math.log(m.p_bear) + up, math.log1p(-m.p_bear) + down)))
    s_bull = multiplicity * math.fsum(log_c_bull)
    s_bear = multiplicity * math.fsum(log_c_bear)
    mm = me.market
    log_a1 = float(np.logaddexp(
        math.log(mm.p_bull * p_cn) + s_bull, math.log(mm.p_bear * (1.0 - p_cn)) + s_bear
    ))
    log_a2 = float(np.logaddexp(
        math.log1p(-mm.p_bull) + math.log(p_cn) + s_bull,
        math.log1p(-mm.p_bear) + math.log1p(-p_cn) + s_bear,
    ))
    return log_a1, log_a2, log_c_bull, log_c_bear


def _safe_exp(x: float, what: str) -> float:
    return math.exp(_guard(x, what))


def response_coefficients(inp: BestResponseInputs) -> ResponseCoefficients:
    log_a1, log_a2, lcb, lcr = _log_ratio_terms(inp)
    q = inp.me.market.q
    log_z = math.log1p(-q) - math.log(q) + log_a1 - log_a2
    return ResponseCoefficients(
        a1=_safe_exp(log_a1, "A1"),
        a2=_safe_exp(log_a2, "A2"),
        b1=_safe_exp(-(1.0 - q) * log_z, "B1"),
        b2=_safe_exp(q * log_z, "B2"),
        c_bull=tuple(_safe_exp(v, "C") for v in lcb),
        c_bear=tuple(_safe_exp(v, "C") for v in lcr),
    )


def _effective_gamma(me: AgentSpec, n: int) -> float:
    scale = 1.0 - me.theta / n
    if scale <= 0.0:
        raise ValidationError("theta equals N: relative wealth carries no own position")
    return me.gamma * scale


def best_response(inp: BestResponseInputs) -> float:
    log_a1, log_a2, _, _ = _log_ratio_terms(inp)
    m = inp.me.market
    log_z = math.log1p(-m.q) - math.log(m.q) + log_a1 - log_a2
    return log_z / (_effective_gamma(inp.me, inp.n_agents) * (m.u - m.d))


def best_response_value_factor(inp: BestResponseInputs) -> float:
    """``A1*B1 + A2*B2``: minus the optimal expected utility at zero relative wealth."""
    return _value_factor(*_log_ratio_terms(inp)[:2], inp.me.market.q)


def _value_factor(log_a1: float, log_a2: float, q: float) -> float:
    log_z = math.log1p(-q) - math.log(q) + log_a1 - log_a2
    return _safe_exp(
        float(np.logaddexp(log_a1 - (1.0 - q) * log_z, log_a2 + q * log_z)), "value factor"
    )


# ---------------------------------------------------------------------------
# Symmetric N-agent game

def _homogeneous_log_f(log_y: float, n: int, prefs: AgentPreferences,
                       m: MarketPeriodParams, cn: CommonNoiseParams) -> float:
    p_cn, pb, pr = cn.p_cn, m.p_bull, m.p_bear
    expo = prefs.theta / (n - prefs.theta)
    log_s = expo * log_y
    # ln r = (N-1) ln[(pb s + 1 - pb) / (pr s + 1 - pr)]
    log_r = (n - 1) * (
        np.logaddexp(math.log(pb) + log_s, math.log1p(-pb))
        - np.logaddexp(math.log(pr) + log_s, math.log1p(-pr))
    )
    num = np.logaddexp(math.log(pb * p_cn) + log_r, math.log(pr * (1.0 - p_cn)))
    den = np.logaddexp(math.log((1.0 - pb) * p_cn) + log_r, math.log((1.0 - pr) * (1.0 - p_cn)))
    return float(math.log1p(-m.q) - math.log(m.q) + num - den)


def homogeneous_fixed_point_map(y: float, n: int, prefs: AgentPreferences,
                                m: MarketPeriodParams, cn: CommonNoiseParams) -> float:
    if not y > 0:
        raise ValidationError(f"y must be > 0, got {y!r}")
    if n - prefs.theta <= 0:
        raise ValidationError("N must exceed theta")
    return math.exp(_homogeneous_log_f(math.log(y), n, prefs, m, cn))


def _homogeneous_upper_bound(n: int, m: MarketPeriodParams, cn: CommonNoiseParams) -> float:
    """Limit of the map as ``y`` grows, in log form to survive large N."""
    p_cn, pb, pr = cn.p_cn, m.p_bull, m.p_bear
    log_ratio = (n - 1) * (math.log(pb) - math.log(pr))
    num = np.logaddexp(math.log(pb * p_cn) + log_ratio, math.log(pr * (1.0 - p_cn)))
    den = np.logaddexp(
        math.log((1.0 - pb) * p_cn) + log_ratio, math.log((1.0 - pr) * (1.0 - p_cn))
    )
    return float(math.log1p(-m.q) - math.log(m.q) + num - den)


def homogeneous_equilibrium(n: int, prefs: AgentPreferences, m: MarketPeriodParams,
                            cn: CommonNoiseParams, tol: float = Y_TOL) -> NashSolution:
    """Symmetric equilibrium of N identical agents.

    The unique root of ``f(y) = y`` is bracketed and bisected in ``ln y``;
    the map is increasing and bounded, so the bracket always exists.
    """
    if n < 1:
        raise ValidationError("N must be >= 1")
    agent = AgentSpec(prefs, m)
    problems = validate(agent, cn)
    if problems:
        raise ValidationError(problems, "homogeneous_equilibrium")

    def g(t: float) -> float:
        return _homogeneous_log_f(t, n, prefs, m, cn) - t

    lo = math.log(1e-8)
    hi = math.log(2.0) + max(_homogeneous_upper_bound(n, m, cn), math.log(1e-8))
    for _ in range(MAX_BISECT):
        if g(lo) > 0:
            break
        lo -= math.log(2.0)
    else:
        raise SolverError("lower bracket expansion failed", {"lo": lo})
    for _ in range(MAX_BISECT):
        if g(hi) < 0:
            break
        hi += math.log(2.0)
    else:
        raise SolverError("upper bracket expansion failed", {"hi": hi})

    t, info = optimize.bisect(g, lo, hi, xtol=tol * 1e-3, rtol=4 * np.finfo(float).eps,
                              maxiter=MAX_BISECT, full_output=True)
    y = math.exp(t)
    residual = abs(math.exp(_homogeneous_log_f(t, n, prefs, m, cn)) - y)
    if residual >= max(tol, 1e-10 * max(1.0, y)):
        raise SolverError("homogeneous fixed point residual too large", {"y": y, "residual": residual})
    pi = t / (_effective_gamma(agent, n) * (m.u - m.d))
    # n - 1 identical opponents: one log-C term counted n - 1 times.
    log_a1, log_a2, _, _ = _log_terms(agent, ((agent, pi),), cn, n, multiplicity=n - 1)
    factor = _value_factor(log_a1, log_a2, m.q)
    return NashSolution(
        strategies=(pi,) * n,
        fixed_point_y=y,
        update_factors=(factor,) * n,
        residual=residual,
        iterations=info.iterations,
    )


# ---------------------------------------------------------------------------
# Two heterogeneous agents

def two_agent_joint_probs(a1: AgentSpec, a2: AgentSpec, cn: CommonNoiseParams) -> TwoAgentJointProbs:
    c = cn.p_cn
    b1, r1 = a1.market.p_bull, a1.market.p_bear
    b2, r2 = a2.market.p_bull, a2.market.p_bear
    return TwoAgentJointProbs(
        p11=c * b2 * b1 + (1 - c) * r2 * r1,
        p01=c * b2 * (1 - b1) + (1 - c) * r2 * (1 - r1),
        p10=c * (1 - b2) * b1 + (1 - c) * (1 - r2) * r1,
        p00=c * (1 - b2) * (1 - b1) + (1 - c) * (1 - r2) * (1 - r1),
    )


def _pair_solution(agents: Sequence[AgentSpec], cn: CommonNoiseParams, pis: Sequence[float],
                   y: float | None, residual: float, iterations: int,
                   experimental: bool = False) -> NashSolution:
    n = len(agents)
    factors = []
    for i, me in enumerate(agents):
        others = tuple((agents[k], pis[k]) for k in range(n) if k != i)
        factors.append(best_response_value_factor(BestResponseInputs(me, others, cn, n)))
    return NashSolution(tuple(float(p) for p in pis), y, tuple(factors), residual, iterations, experimental)


def _two_agent_decoupled(a1: AgentSpec, a2: AgentSpec, cn: CommonNoiseParams) -> NashSolution:
    # With theta2 = 0 agent 2 ignores agent 1, so agent 2 moves first.
    pi2 = best_response(BestResponseInputs(a2, ((a1, 0.0),), cn, 2))
    pi1 = best_response(BestResponseInputs(a1, ((a2, pi2),), cn, 2))
    return _pair_solution((a1, a2), cn, (pi1, pi2), None, 0.0, 0)


def two_agent_equilibrium(a1: AgentSpec, a2: AgentSpec, cn: CommonNoiseParams,
                          tol: float = Y_TOL) -> NashSolution:
    """Forward Nash equilibrium of two heterogeneous agents.

    ``y = exp(gamma2 theta2 (u1 - d1) pi1 / 2)`` couples the two best
    responses; the unknown is ``pi1`` itself.  The equation ``L(y) = R(y)`` is solved with the denominator of ``R``
    multiplied through, bracketed and bisected.  When several sign changes
    exist the smallest root is used.  ``residual`` is the largest
    best-response gap of the returned pair.
    """
    problems = [f"agent 1: {v}" for v in validate(a1, cn)] + [f"agent 2: {v}" for v in validate(a2, cn)]
    if problems:
        raise ValidationError(problems, "two_agent_equilibrium")
    if a2.theta == 0.0:
        return _two_agent_decoupled(a1, a2, cn)

    jp = two_agent_joint_probs(a1, a2, cn)
    g1, t1, g2, t2 = a1.gamma, a1.theta, a2.gamma, a2.theta
    q1, q2 = a1.market.q, a2.market.q
    a = g1 * t1 / (g2 * (2.0 - t2))
    # Solve in pi1 rather than s = kappa pi1: kappa vanishes with theta2
    # and would cost all precision in pi1 = s / kappa.
    kappa = g2 * t2 * (a1.market.u - a1.market.d) / 2.0
    bk = (2.0 - t1) * g1 * (a1.market.u - a1.market.d) / 2.0
    log_k = math.log1p(-q1) - math.log(q1)
    log_k2 = math.log1p(-q2) - math.log(q2)
    k1 = math.exp(log_k)
    e_sing = jp.p11 * k1 / jp.p01  # e^{b s_sing}
    pi_sing = (math.log(jp.p11) + log_k - math.log(jp.p01)) / bk

    def log_ratio2(pi1: float) -> float:
        s = kappa * pi1
        return log_k2 + float(np.logaddexp(math.log(jp.p11) + s, math.log(jp.p01))
                              - np.logaddexp(math.log(jp.p10) + s, math.log(jp.p00)))

    def gap(pi1: float) -> float:
        # L den - num with R = num/den: clearing the pole keeps the root
        # reachable when it sits on it (independent stocks).
        x = bk * (pi1 - pi_sing)
        den = jp.p11 * k1 * math.expm1(x)
        num = jp.p10 * k1 - jp.p00 * e_sing * math.exp(x)
        return _safe_exp(a * log_ratio2(pi1), "two-agent coupling") * den - num

    # Under positive correlation gap > 0 on [pi_sing, inf), and once
    # e^x is negligible gap ~ -(L p11 + p10) k < 0.
    lo, hi = pi_sing - 40.0 / bk, pi_sing + 1.0 / bk
    g_lo, g_hi = gap(lo), gap(hi)
    if not (g_lo < 0 < g_hi):
        raise SolverError("no sign change in two-agent bracket",
                          {"lo": lo, "hi": hi, "gap_lo": g_lo, "gap_hi": g_hi})

    grid = np.linspace(lo, hi, 257)
    signs = np.sign([gap(x) for x in grid])
    changes = np.flatnonzero(signs[:-1] * signs[1:] <= 0)
    if len(changes) > 1:
        log.warning("two-agent equation has %d sign changes; using the smallest root", len(changes))
    j = int(changes[0])
    x_lo, x_hi = float(grid[j]), float(grid[j + 1])
    if signs[j] == 0:
        pi1 = x_lo
        iterations = 0
    else:
        pi1, info = optimize.bisect(gap, x_lo, x_hi, xtol=tol * 1e-3, rtol=4 * np.finfo(float).eps,
                                    maxiter=MAX_BISECT, full_output=True)
        iterations = info.iterations
    y = math.exp(kappa * pi1)
    pi2 = log_ratio2(pi1) / (g2 * (1.0 - t2 / 2.0) * (a2.market.u - a2.market.d))
    residual = best_response_residual((a1, a2), cn, (pi1, pi2))
    return _pair_solution((a1, a2), cn, (pi1, pi2), y, residual, iterations)


# ---------------------------------------------------------------------------
# Heterogeneous N agents (experimental)

def best_response_residual(agents: Sequence[AgentSpec], cn: CommonNoiseParams,
                           strategies: Sequence[float]) -> float:
    """Largest gap between a strategy and the best response to the others."""
    n = len(agents)
    worst = 0.0
    for i, me in enumerate(agents):
        others = tuple((agents[k], strategies[k]) for k in range(n) if k != i)
        worst = max(worst, abs(best_response(BestResponseInputs(me, others, cn, n)) - strategies[i]))
    return worst


def best_response_iteration(agents: Sequence[AgentSpec], cn: CommonNoiseParams,
                            tol: float = Y_TOL, max_iter: int = 1000
                            ) -> NashSolution | NonConvergenceReport:
    """Gauss-Seidel best-response dynamics for heterogeneous agents.

    No convergence guarantee exists, so the result is flagged experimental
    and a :class:`NonConvergenceReport` is returned instead of raising.
    """
    n = len(agents)
    if n < 2:
        raise ValidationError("best_response_iteration needs at least two agents")
    pis = [0.0] * n
    prev_delta = [0.0] * n
    flips = [0] * n
    damping = [1.0] * n
    history = [tuple(pis)]
    change = math.inf
    for sweep in range(1, max_iter + 1):
        change = 0.0
        for i, me in enumerate(agents):
            others = tuple((agents[k], pis[k]) for k in range(n) if k != i)
            target = best_response(BestResponseInputs(me, others, cn, n))
            delta = target - pis[i]
            flips[i] = flips[i] + 1 if delta * prev_delta[i] < 0 else 0
            if flips[i] >= 2:
                damping[i] = 0.5
            step = damping[i] * delta
            pis[i] += step
            prev_delta[i] = delta
            change = max(change, abs(step))
        history.append(tuple(pis))
        if change < tol:
            residual = best_response_residual(agents, cn, pis)
            return _pair_solution(agents, cn, pis, None, residual, sweep, experimental=True)
    return NonConvergenceReport(max_iter, tuple(pis), tuple(history), change)
