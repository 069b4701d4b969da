"""Exception hierarchy.

Each class carries the CLI exit code it maps to.
"""


class SynfuseError(Exception):
    exit_code = 1


class NumericError(SynfuseError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""

    exit_code = 1


class ConfigError(SynfuseError, ValueError):
    """Invalid hyperparameters, flags or preconditions on sizes."""

    exit_code = 2


class InsufficientSamplesError(ConfigError):
    pass


class ShapeError(ConfigError):
    """Input widths or row counts do not match what an operation expects."""


class UsageError(SynfuseError, RuntimeError):
    """API misuse, e.g. a stale forward cache handed to backward."""

    exit_code = 2


class ParseError(SynfuseError, ValueError):
    exit_code = 3

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)
