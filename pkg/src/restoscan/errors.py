"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
