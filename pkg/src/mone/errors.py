"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit 1,
numeric/training failures exit 2.
"""


class MoneError(Exception):
    """Base class for all package errors."""


class ConfigError(MoneError):
    """Invalid configuration: bad dimensions, unknown keys, out-of-range values."""


class InfeasibleCapacityError(ConfigError):
    """Requested effective capacity lies outside the feasible range."""


class ShapeError(MoneError):
    """Tensor operands have incompatible shapes."""


class NumericError(MoneError):
    """Non-finite values where finite ones are required."""


class RoutingError(MoneError):
    """Invalid routing input: malformed capacity distribution or nested dimension."""


class FormatError(MoneError):
    """Malformed external file (IDX data, checkpoint)."""


class TrainingError(MoneError):
    """Training diverged or could not proceed."""
