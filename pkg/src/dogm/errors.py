"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, see :mod:`dogm.cli`.
"""


class DogmError(Exception):
    """Base class for all package errors."""


class ContractError(DogmError, ValueError):
    """A caller violated an operation's precondition."""


class GridRangeError(DogmError, IndexError):
    """A window or placement does not fit the grid it refers to."""


class ConfigError(DogmError):
    """Invalid or inconsistent configuration (exit code 2)."""


class SchemaError(ConfigError):
    """A structured input file does not match its schema."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(DogmError):
    """Missing, malformed or mismatched data files (exit code 3)."""


class NumericError(DogmError):
    """Non-finite values during training or inference (exit code 4)."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)
