#
#   FASC Toolkit - Exceptions
#


class FascError(Exception):
    """ Base class for every error raised by the toolkit """
    pass


class TensorFormatError(FascError):
    pass


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class NonFiniteValueError(TensorFormatError):
    """ A tensor contained NaN or Inf. Carries the offending row and column. """

    def __init__(self, message, row=None, column=None):
        super(NonFiniteValueError, self).__init__(message)
        self.row = row
        self.column = column


class ManifestError(FascError):
    pass


class DimensionMismatchError(FascError, ValueError):
    pass


class RankError(FascError, ValueError):
    pass


class DegenerateGradientsError(FascError):
    pass


class DegenerateCovarianceError(FascError):
    pass


class UndefinedCorrelationError(FascError):
    pass


class InsufficientSamplesError(DegenerateCovarianceError):
    """ Too few samples for the statistic asked for; the data itself may be fine """
    pass
