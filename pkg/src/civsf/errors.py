"""Exception taxonomy shared across the package.

Every error raised by library code derives from CivsfError so callers (and the
CLI) can map failures to exit codes without matching on message text.
"""

from __future__ import annotations


class CivsfError(Exception):
    """Base class for all package errors."""


class ConfigError(CivsfError):
    """Bad configuration: unknown key, unparsable value, invalid combination."""


class ShapeError(CivsfError):
    """Array shape or dimensionality violates an operation's contract."""


class DomainError(CivsfError):
    """A value is outside its documented range (ratios, DOYs, indices)."""


class DataFormatError(CivsfError):
    """A serialized artifact is malformed. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(CivsfError):
    """Non-finite values where finite ones are required (NaN/Inf aborts)."""


class CompatibilityError(CivsfError):
    """Checkpoint, framework, and head combinations that cannot be paired."""
