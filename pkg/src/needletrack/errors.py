"""Exception hierarchy.

Data errors map to CLI exit code 2, numerical failures to exit code 3.
"""


class NeedleTrackError(Exception):
    """Base class for all package errors."""


class DataError(NeedleTrackError):
    """Malformed, missing or insufficient input data."""


class NumericalError(NeedleTrackError):
    """A computation hit a degenerate or ill-posed configuration."""


class AngleNearPi(NumericalError):
    pass


class BehindCamera(NumericalError):
    pass


class DegenerateHomography(NumericalError):
    pass


class OutOfArc(DataError):
    pass


class NoKeypoints(DataError):
    pass


class EmptyObservation(DataError):
    pass


class InsufficientData(DataError):
    pass


class AssembleFailed(NumericalError):
    pass


class ZeroHessian(NumericalError):
    pass


class InsufficientPoints(DataError):
    pass


class DegenerateFit(NumericalError):
    pass


class CoincidentMeans(NumericalError):
    pass


class NonPositiveSigma(DataError):
    pass


class InvalidInterval(DataError):
    pass


class SchemaMismatch(DataError):
    pass
