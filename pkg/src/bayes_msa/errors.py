"""Exception hierarchy shared across the package."""


class BayesMSAError(Exception):
    """Base class for all package errors."""


class InvalidValue(BayesMSAError, ValueError):
    pass


class ShapeError(BayesMSAError, ValueError):
    pass


class DomainError(BayesMSAError, ValueError):
    pass


class DataError(BayesMSAError):
    """Problems with input data files or series."""


class ParseError(DataError):
    pass


class MissingColumn(DataError):
    pass


class NonMonotonicTimestamps(DataError):
    pass


class GapError(DataError):
    def __init__(self, message, gap_at=None):
        super().__init__(message)
        self.gap_at = gap_at


class TooShort(DataError):
    pass


class DegenerateScale(DataError):
    pass


class NotFound(DataError):
    pass


class ConfigError(BayesMSAError):
    pass


class TrainingDiverged(BayesMSAError):
    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch
