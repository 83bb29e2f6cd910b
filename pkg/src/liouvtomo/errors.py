"""Exception types shared across the package."""


class LiouvTomoError(Exception):
    """Base class for package errors."""


class InvalidInputError(LiouvTomoError, ValueError):
    """Arguments violate a precondition (shape, range, finiteness)."""


class BranchFailureError(LiouvTomoError, ArithmeticError):
    """Principal matrix logarithm undefined: eigenvalue on the closed
    negative real axis.  Callers may fall back to finite differences."""


class IncompleteDataError(LiouvTomoError):
    """A reconstruction needs conditioning outcomes that the dataset does
    not cover."""

    def __init__(self, missing, message=None):
        self.missing = sorted(missing)
        super().__init__(message or f"missing conditioning outcomes: {self.missing}")


class IntegrationError(LiouvTomoError, RuntimeError):
    """An ODE solve did not meet its tolerance."""


class EfficiencyThresholdError(InvalidInputError):
    """Detection efficiency at or below 1/2: the loss inversion diverges
    under truncation noise."""


class ConfigError(LiouvTomoError, ValueError):
    """Configuration file failed schema validation or cross-field checks."""


class TruncationWarning(UserWarning):
    """A truncated series was cut while its last term was still above the
    requested tail tolerance."""
