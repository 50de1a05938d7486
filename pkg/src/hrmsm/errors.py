"""Exception hierarchy.

Three families map onto CLI exit codes: configuration problems (2), data
problems (3) and numerical failures (4).
"""


class HRMSMError(Exception):
    """Base class for all package errors."""

    exit_code = 1

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class ConfigError(HRMSMError, ValueError):
    exit_code = 2


class DataError(HRMSMError, ValueError):
    exit_code = 3


class NumericalError(HRMSMError, ArithmeticError):
    exit_code = 4


# configuration
class InvalidFilter(ConfigError):
    pass


class UnknownVcov(ConfigError):
    pass


class InvalidParams(ConfigError):
    pass


class InvalidModel(ConfigError):
    pass


# data
class MissingColumn(DataError):
    pass


class NonConsecutiveTimepoints(DataError):
    pass


class InvariantViolation(DataError):
    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["row"] = self.row
        return d


class PropensityOutOfRange(InvariantViolation):
    pass


class InsufficientTimepoints(DataError):
    pass


class UnknownModifier(DataError):
    pass


class WindowLengthMismatch(DataError):
    pass


class DegeneratePropensity(DataError):
    pass


# numerical
class SingularSystem(NumericalError):
    def __init__(self, message: str, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction

    def to_dict(self) -> dict:
        d = super().to_dict()
        if self.null_direction is not None:
            d["null_direction"] = [float(v) for v in self.null_direction]
        return d


class NoConvergence(NumericalError):
    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class EmptyCell(NumericalError):
    def __init__(self, message: str, regime: str | None = None):
        super().__init__(message)
        self.regime = regime


class NonFiniteFeature(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class RankDeficientDesign(NumericalError):
    pass


class NuisanceFitFailure(NumericalError):
    pass
