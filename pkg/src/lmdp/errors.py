"""Exception hierarchy shared by every module."""


class LMDPError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LMDPError, ValueError):
    pass


class ConfigError(LMDPError, ValueError):
    pass


class EmptyBatchError(LMDPError, ValueError):
    pass


class InvalidWeightsError(LMDPError, ValueError):
    pass


class DegenerateCalibrationError(LMDPError, ValueError):
    pass


class NoPreferredDirectionError(LMDPError, ValueError):
    """Every layer has a zero inner product with the mean gradient."""


class CalibrationRangeError(LMDPError, ValueError):
    pass


class DivergenceError(LMDPError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SplitError(LMDPError, ValueError):
    pass


class DegenerateLabelsError(LMDPError, ValueError):
    pass


class InsufficientDataError(LMDPError, ValueError):
    pass


class ComparabilityError(LMDPError, ValueError):
    pass


class FormatError(LMDPError, ValueError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path
