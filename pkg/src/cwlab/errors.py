"""Exception types shared across the toolkit.

The CLI maps each class to a process exit code.
"""


class CwlabError(Exception):
    exit_code = 4


class ConfigError(CwlabError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 3


class InputError(CwlabError, ValueError):
    """Arguments that violate an operation's preconditions."""

    exit_code = 3


class FormatError(CwlabError, ValueError):
    """A persisted artifact is truncated, corrupt or has the wrong schema."""

    exit_code = 3


class NumericError(CwlabError, ArithmeticError):
    """Non-finite values or an ill-conditioned linear solve."""

    exit_code = 4
