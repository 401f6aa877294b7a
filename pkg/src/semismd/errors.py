"""Exception types shared across the package."""


class SemiSMDError(Exception):
    """Base class for all library errors."""


class ShapeError(SemiSMDError, ValueError):
    """Operand extents are incompatible."""


class DomainError(SemiSMDError, ValueError):
    """A value lies outside the domain of an operation."""


class ChartError(DomainError):
    """Rotation too close to pi for the canonical axis-angle chart."""


class ConfigError(SemiSMDError, ValueError):
    """Invalid model or experiment configuration."""


class NumericalError(SemiSMDError, FloatingPointError):
    """Non-finite value encountered where a finite one is required."""


class DegenerateBatch(SemiSMDError):
    """A loss has nothing to supervise (no valid samples or pixels)."""
