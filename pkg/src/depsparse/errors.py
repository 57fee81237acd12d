"""Semantic exception hierarchy shared across the package."""


class DepsparseError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(DepsparseError, ValueError):
    """Invalid, inconsistent, or unknown configuration input."""


class FormatError(ConfigError):
    """A file (support text, CSV, JSON) does not match its documented format."""


class GenerationError(DepsparseError, RuntimeError):
    """Synthetic generation exhausted its rejection budget."""


class DegenerateMapError(DepsparseError, ValueError):
    """A map whose Jacobian vanishes identically over the probe sample."""


class NumericError(DepsparseError, FloatingPointError):
    """Non-finite values in a numeric kernel (names the offending layer)."""


class TrainingError(DepsparseError, RuntimeError):
    """Training diverged; carries the history up to the failure point."""

    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = tuple(history)


class EvaluationError(DepsparseError, RuntimeError):
    """An evaluation stage failed; the message names the stage."""
