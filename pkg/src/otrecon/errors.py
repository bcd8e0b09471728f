"""Exception hierarchy shared by all modules.

The CLI maps ``ContractError`` (and subclasses) to exit status 1 and
``NumericalBreakdownError`` to exit status 2.
"""


class ContractError(ValueError):
    """A precondition or shape contract was violated by the caller."""


class ConfigError(ContractError):
    """Invalid or unknown configuration key/value."""


class DegenerateInputError(ContractError):
    """Input that admits no meaningful result (e.g. zero total mass)."""


class CapacityError(ContractError):
    """Instance is larger than the routine supports."""


class NumericalBreakdownError(ArithmeticError):
    """Non-finite value or division by zero inside an iterative computation."""

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where
