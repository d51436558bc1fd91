"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ValidationError(ValueError):
    """Input data violates a documented contract."""


class ParseError(ValueError):
    """A file could not be parsed."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""
