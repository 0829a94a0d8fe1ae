"""Exception hierarchy shared by every module.

The CLI maps these onto its exit codes (usage/config -> 2, data -> 3,
failed internal check -> 4).
"""


class SGNetPoseError(Exception):
    pass


class ShapeError(SGNetPoseError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(SGNetPoseError):
    """An API was called in a state where it is not allowed."""


class ConfigError(SGNetPoseError, ValueError):
    """Invalid or mutually inconsistent configuration."""


class DataError(SGNetPoseError):
    """Malformed or unusable input data."""


class CheckFailure(SGNetPoseError):
    """An internal verification (gradcheck and friends) did not pass."""
