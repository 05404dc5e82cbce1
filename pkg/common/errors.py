"""Exceptions raised across the pipeline.

Every error carries the exit code the command line reports for it.
"""
from typing import Optional


class GsnpError(Exception):
    """Base class for expected failures."""

    exit_code = 1


class UsageError(GsnpError):
    """Bad flags or a configuration that does not match the schema."""

    exit_code = 1

    def __init__(self, message: str, keys: Optional[list[str]] = None):
        """Remember the offending keys, if any."""
        self.keys = list(keys or [])
        if self.keys:
            message = f"{message}: {', '.join(self.keys)}"
        super().__init__(message)


class DataError(GsnpError):
    """Input data is missing, malformed or inconsistent."""

    exit_code = 2


class ParseError(DataError):
    """A record in a triple file could not be parsed."""

    def __init__(self, path: str, line: int, message: str):
        """Point at the offending line."""
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class UnknownEntityError(DataError):
    """An entity or relation name is not in the graph."""


class PoolExhaustedError(DataError):
    """No entity is left to build a negative or a candidate from."""


class CheckpointError(DataError):
    """A checkpoint is missing or unreadable."""


class NumericError(GsnpError):
    """Something went wrong with the numbers."""

    exit_code = 3

    def __init__(self, message: str, metadata: Optional[dict] = None):
        """Attach whatever context explains the failure."""
        self.metadata = dict(metadata or {})
        if self.metadata:
            details = ", ".join(f"{k}={v}" for k, v in self.metadata.items())
            message = f"{message} ({details})"
        super().__init__(message)


class ShapeError(NumericError):
    """Operands of a tensor operation have incompatible shapes."""
