"""Exception hierarchy shared by every dr2net module."""


class Dr2Error(Exception):
    """Base class for all dr2net errors."""


class DimensionError(Dr2Error, ValueError):
    pass


class StateError(Dr2Error, RuntimeError):
    """Raised when an operation needs state that was never recorded
    (missing forward cache, uninitialized batchnorm statistics)."""


class NumericError(Dr2Error, ArithmeticError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss or gradient."""


class InvalidParameterError(Dr2Error, ValueError):
    pass


class CheckpointError(Dr2Error, IOError):
    pass


class DatasetError(Dr2Error, IOError):
    pass


class LayoutError(Dr2Error, ValueError):
    pass


class SingularSystemError(NumericError):
    pass


class ConfigError(Dr2Error, ValueError):
    pass
