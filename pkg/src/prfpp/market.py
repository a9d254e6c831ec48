"""Binomial market, common-noise and preference types.

Each agent trades a single stock whose gross one-period return is ``u``
or ``d``.  A shared Bernoulli regime variable (bull with probability
``p_cn``) moves the conditional up-probability between ``p_bull`` and
``p_bear``; given the regime, stocks move independently.  Derived
quantities are computed on demand and never cached.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ValidationError

PROB_TOL = 1e-12
"""Distance from 0 and 1 below which a probability counts as degenerate."""

CONSISTENCY_TOL = 1e-12
"""Allowed mismatch in the total-probability identity for ``p``."""


def _finite(name: str, value: float, out: list[str]) -> bool:
    if not isinstance(value, (int, float, np.floating, np.integer)) or isinstance(value, bool):
        out.append(f"{name} must be a real number")
        return False
    if not math.isfinite(float(value)):
        out.append(f"{name} must be finite")
        return False
    return True


def _check_prob(name: str, value: float, out: list[str]) -> None:
    if _finite(name, value, out) and not (PROB_TOL <= value <= 1.0 - PROB_TOL):
        out.append(f"{name} must lie strictly inside (0, 1)")


def market_violations(
    u: float,
    d: float,
    p: float,
    p_bull: float,
    p_bear: float,
    p_cn: float | None = None,
    degenerate_ok: bool = False,
) -> list[str]:
    """Return every broken market invariant as a readable message."""
    out: list[str] = []
    if _finite("d", d, out):
        if d <= 0:
            out.append("d must be > 0")
        if d >= 1:
            out.append("d must be < 1")
    if _finite("u", u, out) and u <= 1:
        out.append("u must be > 1")
    for name, value in (("p", p), ("p_bull", p_bull), ("p_bear", p_bear)):
        _check_prob(name, value, out)
    if not out or all(not m.startswith(("p_bull", "p_bear")) for m in out):
        if degenerate_ok:
            if p_bull < p_bear:
                out.append("p_bull must be >= p_bear")
        elif not p_bull > p_bear:
            out.append("p_bull must be > p_bear")
    if p_cn is not None:
        _check_prob("p_cn", p_cn, out)
        implied = p_cn * p_bull + (1.0 - p_cn) * p_bear
        if abs(implied - p) > CONSISTENCY_TOL:
            out.append(
                f"total-probability mismatch: p={p!r} but "
                f"p_cn*p_bull+(1-p_cn)*p_bear={implied!r}"
            )
    return out


def preference_violations(gamma: float, theta: float, x0: float = 0.0) -> list[str]:
    out: list[str] = []
    if _finite("gamma", gamma, out) and gamma <= 0:
        out.append("gamma must be > 0")
    if _finite("theta", theta, out) and not 0.0 <= theta <= 1.0:
        out.append("theta must lie in [0, 1]")
    _finite("x0", x0, out)
    return out


@dataclass(frozen=True)
class CommonNoiseParams:
    """Bull-regime probability shared by every stock in a period."""

    p_cn: float

    def __post_init__(self) -> None:
        out: list[str] = []
        _check_prob("p_cn", self.p_cn, out)
        if out:
            raise ValidationError(out, "CommonNoiseParams")


@dataclass(frozen=True)
class MarketPeriodParams:
    """One stock over one period.

    ``degenerate_ok`` relaxes ``p_bull > p_bear`` to ``p_bull >= p_bear``.
    It exists for regime-free markets and limit tests only.
    """

    u: float
    d: float
    p: float
    p_bull: float
    p_bear: float
    degenerate_ok: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        out = market_violations(
            self.u, self.d, self.p, self.p_bull, self.p_bear,
            degenerate_ok=self.degenerate_ok,
        )
        if out:
            raise ValidationError(out, "MarketPeriodParams")

    @classmethod
    def from_regimes(
        cls, u: float, d: float, p_bull: float, p_bear: float,
        cn: CommonNoiseParams | float, degenerate_ok: bool = False,
    ) -> MarketPeriodParams:
        """Build a market whose ``p`` follows from the regime probabilities."""
        p = unconditional_up_prob(cn, p_bull, p_bear)
        return cls(u, d, p, p_bull, p_bear, degenerate_ok=degenerate_ok)

    @classmethod
    def regime_free(cls, u: float, d: float, p: float) -> MarketPeriodParams:
        """A stock that ignores the common noise (``p_bull = p_bear = p``)."""
        return cls(u, d, p, p, p, degenerate_ok=True)

    @property
    def q(self) -> float:
        return (1.0 - self.d) / (self.u - self.d)

    @property
    def delta_bull(self) -> float:
        return self.p_bull * (self.u - 1.0) + (1.0 - self.p_bull) * (self.d - 1.0)

    @property
    def delta_bear(self) -> float:
        return self.p_bear * (self.u - 1.0) + (1.0 - self.p_bear) * (self.d - 1.0)

    def replace(self, **changes: Any) -> MarketPeriodParams:
        data = {
            "u": self.u, "d": self.d, "p": self.p,
            "p_bull": self.p_bull, "p_bear": self.p_bear,
            "degenerate_ok": self.degenerate_ok,
        }
        data.update(changes)
        return MarketPeriodParams(**data)


@dataclass(frozen=True)
class AgentPreferences:
    """CARA risk aversion, competition weight and initial wealth."""

    gamma: float
    theta: float
    x0: float = 0.0

    def __post_init__(self) -> None:
        out = preference_violations(self.gamma, self.theta, self.x0)
        if out:
            raise ValidationError(out, "AgentPreferences")


@dataclass(frozen=True)
class AgentSpec:
    prefs: AgentPreferences
    market: MarketPeriodParams

    @property
    def gamma(self) -> float:
        return self.prefs.gamma

    @property
    def theta(self) -> float:
        return self.prefs.theta


def _p_cn(cn: CommonNoiseParams | float) -> float:
    return cn.p_cn if isinstance(cn, CommonNoiseParams) else float(cn)


def risk_neutral_up_prob(m: MarketPeriodParams) -> float:
    return m.q


def expected_excess_return(m: MarketPeriodParams) -> float:
    return m.p * (m.u - 1.0) + (1.0 - m.p) * (m.d - 1.0)


def regime_drifts(m: MarketPeriodParams) -> tuple[float, float]:
    """Conditional expected excess returns ``(bull, bear)``."""
    return m.delta_bull, m.delta_bear


def unconditional_up_prob(cn: CommonNoiseParams | float, p_bull: float, p_bear: float) -> float:
    p_cn = _p_cn(cn)
    return p_cn * p_bull + (1.0 - p_cn) * p_bear


def pairwise_return_covariance(
    cn: CommonNoiseParams | float, m_i: MarketPeriodParams, m_j: MarketPeriodParams
) -> float:
    """Covariance of two stocks' returns induced by the shared regime.

    Both stocks must use the same price levels ``(u, d)``.
    """
    if abs(m_i.u - m_j.u) > PROB_TOL or abs(m_i.d - m_j.d) > PROB_TOL:
        raise ValidationError("covariance requires shared price levels (u, d)")
    p_cn = _p_cn(cn)
    problems = []
    for label, m in (("m_i", m_i), ("m_j", m_j)):
        problems += [f"{label}: {v}" for v in validate(m, p_cn) if "mismatch" in v]
    if problems:
        raise ValidationError(problems, "pairwise_return_covariance")
    joint_up = (1.0 - p_cn) * m_i.p_bear * m_j.p_bear + p_cn * m_i.p_bull * m_j.p_bull
    return (m_i.u - m_i.d) ** 2 * (joint_up - m_i.p * m_j.p)


def return_moments(m: MarketPeriodParams) -> tuple[float, float, float]:
    """Mean, variance and skewness of the two-point gross return."""
    p, spread = m.p, m.u - m.d
    mean = p * m.u + (1.0 - p) * m.d
    var = p * (1.0 - p) * spread**2
    skew = (1.0 - 2.0 * p) / math.sqrt(p * (1.0 - p))
    return mean, var, skew


def validate(
    spec: AgentSpec | MarketPeriodParams | AgentPreferences | Mapping[str, Any],
    p_cn: float | CommonNoiseParams | None = None,
) -> list[str]:
    """Collect every invariant violation; an empty list means valid.

    Accepts constructed objects or a raw mapping with the same field names,
    so that invalid inputs can be inspected without raising.
    """
    pcn = None if p_cn is None else _p_cn(p_cn)
    if isinstance(spec, AgentSpec):
        return validate(spec.prefs) + validate(spec.market, pcn)
    if isinstance(spec, AgentPreferences):
        return preference_violations(spec.gamma, spec.theta, spec.x0)
    if isinstance(spec, MarketPeriodParams):
        return market_violations(
            spec.u, spec.d, spec.p, spec.p_bull, spec.p_bear, pcn, spec.degenerate_ok
        )
    if isinstance(spec, Mapping):
        out: list[str] = []
        market_keys = ("u", "d", "p", "p_bull", "p_bear")
        if any(k in spec for k in market_keys):
            missing = [k for k in market_keys if k not in spec]
            if missing == ["p"] and pcn is not None:
                spec = {**spec, "p": unconditional_up_prob(pcn, spec["p_bull"], spec["p_bear"])}
                missing = []
            out += [f"{k} is required" for k in missing]
            if not missing:
                out += market_violations(
                    *(spec[k] for k in market_keys), pcn, bool(spec.get("degenerate_ok", False))
                )
        if "gamma" in spec or "theta" in spec:
            out += preference_violations(
                spec.get("gamma", float("nan")), spec.get("theta", float("nan")), spec.get("x0", 0.0)
            )
        return out
    raise TypeError(f"cannot validate object of type {type(spec).__name__}")


# Mean-preserving reparameterizations used by the comparative-statics sweeps.
# They accept floats or numpy arrays.

def volatility_down_level(u, d, p, u_new):
    """Down level that keeps the mean return when ``u`` moves to ``u_new`` at fixed ``p``."""
    mean = p * u + (1.0 - p) * d
    return (mean - p * u_new) / (1.0 - p)


def mean_preserving_up_prob(u, d, p, u_new, d_new):
    """Up-probability keeping the mean return after moving the price levels."""
    mean = p * u + (1.0 - p) * d
    return (mean - d_new) / (u_new - d_new)


def with_volatility(m: MarketPeriodParams, u_new: float) -> MarketPeriodParams:
    """Spread the levels around a fixed mean: new ``u``, ``d`` follows, ``p`` fixed."""
    return m.replace(u=u_new, d=float(volatility_down_level(m.u, m.d, m.p, u_new)))


def with_expected_return(m: MarketPeriodParams, u_new: float) -> MarketPeriodParams:
    """Raise or lower the up level only, leaving ``d`` and all probabilities."""
    return m.replace(u=u_new)


def with_skew(
    m: MarketPeriodParams, u_new: float | None = None, d_new: float | None = None
) -> MarketPeriodParams:
    """Move one level and rebalance ``p`` so the mean return stays fixed.

    The regime probabilities shift in parallel by the change in ``p``, which
    keeps the total-probability identity intact for any ``p_cn``.
    """
    u2 = m.u if u_new is None else u_new
    d2 = m.d if d_new is None else d_new
    p2 = float(mean_preserving_up_prob(m.u, m.d, m.p, u2, d2))
    shift = p2 - m.p
    return m.replace(u=u2, d=d2, p=p2, p_bull=m.p_bull + shift, p_bear=m.p_bear + shift)
