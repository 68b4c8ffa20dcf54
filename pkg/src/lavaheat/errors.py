"""Exception hierarchy shared by the library and the command line."""


class LavaError(Exception):
    """Base class for every error raised by lavaheat."""

    exit_code = 1


class ConfigError(LavaError, ValueError):
    exit_code = 2


class DataError(LavaError, ValueError):
    exit_code = 3


class InsufficientHistoryError(DataError):
    """The nominal lag buffer does not yet hold enough valid samples."""


class NumericError(LavaError, ArithmeticError):
    exit_code = 4


class SimulationError(NumericError):
    """Raised when the building integration diverges."""
