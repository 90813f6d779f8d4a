"""Exception hierarchy for DeskDownscale.

Library code raises these; the command layer maps them to exit codes.
"""

from typing import Optional


class DownscaleError(Exception):
    """Base class for all application errors."""


class ArgumentError(DownscaleError, ValueError):
    """An argument is outside its valid range."""


class DomainError(DownscaleError, ValueError):
    """A coordinate query falls outside the grid footprint."""


class ConfigError(DownscaleError):
    """Configuration or standardization statistics are invalid."""


class ShapeError(DownscaleError, ValueError):
    """Array or field dimensions are incompatible."""


class StateError(DownscaleError, RuntimeError):
    """An operation was invoked against a missing or stale record."""


class UndefinedScoreError(DownscaleError, ArithmeticError):
    """A skill score was requested against a non-positive baseline."""


class FormatError(DownscaleError):
    """A file does not follow its binary or JSON layout."""

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        self.message = message
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class TrainingAborted(DownscaleError, RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message: str, step: int) -> None:
        self.step = step
        super().__init__(f"{message} at step {step}")


class SamplingAborted(DownscaleError, RuntimeError):
    """A sampler produced a non-finite state."""

    def __init__(self, message: str, step: int) -> None:
        self.step = step
        super().__init__(f"{message} at step {step}")


class NoStationsError(DownscaleError, RuntimeError):
    """No observation could be collocated with the forecast grid."""
