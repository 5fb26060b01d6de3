"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration, CLI arguments, or file contents."""


class NumericError(RuntimeError):
    """A computation produced non-finite values or otherwise diverged."""
