"""Exception and warning hierarchy.

Errors fall into three families that the command line maps to exit codes:
configuration problems, bad input data and numerical failures.
"""


class MQARCHError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(MQARCHError):
    """Invalid or unknown configuration."""


class DataError(MQARCHError):
    """Input data that cannot be processed."""


class NumericalError(MQARCHError):
    """A computation that failed for numerical reasons."""


class LengthMismatch(DataError, ValueError):
    pass


class InsufficientHistory(DataError, ValueError):
    pass


class InvalidBar(DataError, ValueError):
    pass


class ZeroDenominator(NumericalError):
    pass


class InsufficientBins(DataError, ValueError):
    pass


class NonSymmetric(DataError, ValueError):
    pass


class DegenerateFactor(DataError, ValueError):
    pass


class NonStationary(NumericalError):
    pass


class SingularCorrelation(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class FitDiverged(NumericalError):
    pass


class NonPositiveIntensity(NumericalError):
    pass


class NegativeIntensityAbort(NumericalError):
    """Too many thinning candidates had a negative intensity."""


class StepOrderError(ConfigError):
    """A calibration step was requested before its prerequisites."""


class NonStationaryWarning(UserWarning):
    pass


class NegativeIntensityClamped(UserWarning):
    pass
