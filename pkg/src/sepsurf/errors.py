"""Exception hierarchy shared by the estimation, prediction and CLI layers."""


class SepsurfError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class DataError(SepsurfError):
    exit_code = 3


class NumericalError(SepsurfError):
    exit_code = 4


class DegenerateWindow(NumericalError):
    """The local design at an evaluation point does not identify the intercept."""

    def __init__(self, *coords):
        self.coords = tuple(float(c) for c in coords)
        super().__init__(f"degenerate smoothing window at {self.coords}")


class InsufficientPairs(DataError):
    pass


class NonPositiveTrace(NumericalError):
    pass


class ZeroDenominator(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class FactorizationFailure(NumericalError):
    pass


class PriceOutOfBracket(DataError):
    pass


class AllCandidatesDegenerate(NumericalError):
    pass


class NonPsdCovariance(NumericalError):
    pass


class EmptySurface(DataError):
    pass
