"""Exception hierarchy shared across the package."""


class DiscourseRaterError(Exception):
    """Base class for all package errors."""


class UsageError(DiscourseRaterError):
    """An API was called in a way its contract forbids."""


class ConfigError(UsageError):
    """A configuration object is internally inconsistent."""


class ShapeError(UsageError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericsError(DiscourseRaterError):
    """A computation encountered non-finite or otherwise invalid numbers."""


class DataError(DiscourseRaterError):
    """Dataset contents violate an invariant (missing modality, bad label, ...)."""


class FormatError(DataError):
    """A serialized file is malformed.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(DiscourseRaterError):
    """A training run could not be completed."""
