"""Exception types raised across the package."""


class ScGplvmError(Exception):
    """Base class for all package errors."""


class ParseError(ScGplvmError):
    pass


class ShapeMismatch(ScGplvmError, ValueError):
    pass


class EmptyResult(ScGplvmError):
    pass


class ZeroRow(ScGplvmError, ValueError):
    pass


class DomainError(ScGplvmError, ValueError):
    pass


class PipelineMismatch(ScGplvmError):
    pass


class NotPositiveDefinite(ScGplvmError):
    pass


class NonFiniteLoss(ScGplvmError, FloatingPointError):
    def __init__(self, message, parts=None):
        super().__init__(message)
        self.parts = parts or {}


class UnknownPreset(ScGplvmError, KeyError):
    pass


class LengthMismatch(ScGplvmError, ValueError):
    pass


class SingleClass(ScGplvmError, ValueError):
    pass


class ConfigError(ScGplvmError, ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
