"""Exception types shared across the package."""


class HopgraphError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 1


class ValidationError(HopgraphError, ValueError):
    """Malformed input: bad ids, inconsistent graphs, unparseable text."""


class ShapeError(ValidationError):
    """Operand shapes do not line up."""


class ConfigError(ValidationError):
    """A configuration value is out of range."""


class NumericError(HopgraphError, ArithmeticError):
    """NaN or infinite values where finite ones are required."""

    exit_code = 2
