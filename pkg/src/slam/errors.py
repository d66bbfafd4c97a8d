"""Exception hierarchy shared across the package."""


class SlamError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(SlamError):
    """Input data or configuration violates a documented invariant."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ParameterError(SlamError):
    """A distribution or kernel parameter is outside its valid domain."""


class DegenerateConditioningError(SlamError):
    """Stationary points too close together for the derivative constraint."""


class FactorizationError(SlamError):
    """A covariance factorization failed even after jitter escalation."""
