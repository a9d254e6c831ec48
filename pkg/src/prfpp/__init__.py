"""Relative forward performance processes for competing CARA investors.

Binomial stocks, a two-regime common noise, finite-agent Nash equilibria,
the mean-field equilibrium and closed-form special cases.
"""

from .errors import PrfppError, RangeError, SolverError, ValidationError, VerificationError
from .market import (
    AgentPreferences,
    AgentSpec,
    CommonNoiseParams,
    MarketPeriodParams,
    validate,
)

__all__ = [
    "AgentPreferences",
    "AgentSpec",
    "CommonNoiseParams",
    "MarketPeriodParams",
    "PrfppError",
    "RangeError",
    "SolverError",
    "ValidationError",
    "VerificationError",
    "validate",
]
__version__ = "0.1.0"
