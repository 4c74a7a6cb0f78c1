"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so library code should
raise the most specific class that applies instead of bare ValueError.
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_INTEGRITY = 5


class MenodeError(Exception):
    """Base class for every error raised by this package."""


class ContractError(MenodeError, ValueError):
    """A caller violated a documented precondition (shapes, ranges, tapes)."""


class DomainError(MenodeError, ValueError):
    """An operation was evaluated outside its mathematical domain."""


class DataError(MenodeError):
    """Malformed input data. Carries the offending line and column when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DivergenceError(MenodeError):
    """A state or loss became non-finite. Carries the time when known."""

    def __init__(self, message, time=None):
        self.time = time
        if time is not None:
            message = f"{message} (at t={time})"
        super().__init__(message)


class IntegrityError(MenodeError):
    """A stored artifact is corrupt or truncated."""


class UnsupportedVersionError(MenodeError):
    """A stored artifact declares a format version this build cannot read."""


class UsageError(MenodeError):
    """Bad command-line or config-file input."""
