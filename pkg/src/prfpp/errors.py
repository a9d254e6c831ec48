"""Exception hierarchy shared by the solvers and the command line."""

from __future__ import annotations


class PrfppError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(PrfppError, ValueError):
    """Input parameters violate a model invariant.

    ``violations`` lists every broken invariant, not only the first one.
    """

    def __init__(self, violations: list[str] | str, context: str | None = None):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        self.context = context
        head = f"{context}: " if context else ""
        super().__init__(head + "; ".join(self.violations))


class SolverError(PrfppError, RuntimeError):
    """A root finder or fixed-point iteration failed to deliver a solution."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class RangeError(PrfppError, OverflowError):
    """An exponent left the representable floating-point range."""


class VerificationError(PrfppError):
    """A post-hoc verification check failed."""
