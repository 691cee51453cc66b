"""Exception types shared across the package.

The CLI maps ``ValidationError`` to exit code 2 and ``NumericalError`` to exit
code 3.
"""


class ValidationError(ValueError):
    """Input failed a documented precondition."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""
