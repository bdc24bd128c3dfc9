"""Exception types shared across volsup.

Argument problems subclass ``ValueError`` so callers can keep catching the
builtin; numerical breakdowns subclass ``ArithmeticError``. The CLI maps each
family to an exit code.
"""


class VolsupError(Exception):
    """Base class for all volsup errors."""

    exit_code = 1


class UsageError(VolsupError, ValueError):
    """A function was called with the wrong shape of input."""


class ConfigError(UsageError):
    """An experiment file or flag could not be turned into a valid config."""


class DomainError(VolsupError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""


class InputError(VolsupError, ValueError):
    """Input data violates a precondition (NaN, sign, range)."""


class NumericError(VolsupError, ArithmeticError):
    """A numerical procedure failed to produce a trustworthy result."""

    exit_code = 3
