"""Exception hierarchy shared by all modules."""


class ConsignError(Exception):
    """Base class for every error raised by the package."""


class InvalidConfig(ConsignError, ValueError):
    pass


class DatasetError(ConsignError):
    """Raised when a dataset on disk violates its manifest."""


class MissingFile(DatasetError, FileNotFoundError):
    pass


class ShapeMismatch(DatasetError):
    pass


class BadLabelRange(DatasetError):
    pass


class NonFiniteScore(DatasetError):
    pass


class KTooLarge(ConsignError, ValueError):
    pass


class EmptyReference(ConsignError, ValueError):
    pass


class InfeasibleThreshold(ConsignError):
    """The CRC threshold is negative, so no lambda can satisfy it."""


class LambdaCapReached(ConsignError):
    pass


class SimplexViolation(DatasetError):
    pass
