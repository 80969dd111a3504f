"""Exception types shared across the package."""

from __future__ import annotations


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class ConfigurationError(ValueError):
    """A config value or combination of values is unusable."""


class DegenerateGeometryError(ValueError):
    """Geometry too degenerate for the requested estimate (e.g. collinear points)."""


class FormatError(ValueError):
    """A file does not conform to its declared on-disk format.

    offset is the byte position at which the problem was detected, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss and was aborted."""
