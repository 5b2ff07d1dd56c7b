"""Exception types shared across the package."""


class CFMNError(Exception):
    """Base class for all package errors."""


class ShapeError(CFMNError, ValueError):
    """Operand extents do not agree."""


class ConfigError(CFMNError, ValueError):
    """A layer or model configuration yields an invalid network."""


class NonFiniteError(CFMNError, ArithmeticError):
    """An op produced NaN or Inf."""


class UninitializedStatisticsError(CFMNError, RuntimeError):
    """Batch-norm evaluated before any running statistics were recorded."""


class ProtocolError(CFMNError, ValueError):
    """An episode or evaluation protocol cannot be satisfied by the data."""
