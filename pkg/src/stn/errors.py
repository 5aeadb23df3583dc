"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ``DataError`` subclasses exit 2,
``NumericalError`` subclasses exit 3.
"""


class STNError(Exception):
    pass


class DataError(STNError):
    pass


class NumericalError(STNError):
    pass


class NotPositiveDefinite(NumericalError):
    def __init__(self, message="matrix is not positive definite", pivot=None, index=None):
        super().__init__(message)
        self.pivot = pivot
        self.index = index


class NonFiniteLoss(NumericalError):
    pass


class NonFiniteInput(NumericalError, ValueError):
    pass


class DimensionMismatch(STNError, ValueError):
    pass


class LengthMismatch(DimensionMismatch):
    pass


class ZeroVector(STNError, ValueError):
    pass


class InvalidConfig(STNError, ValueError):
    pass


class InvalidSpec(DataError, ValueError):
    pass


class InsufficientData(DataError):
    pass


class FormatError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ChecksumMismatch(FormatError):
    pass
