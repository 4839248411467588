"""Exception hierarchy.

Every error raised by the package derives from :class:`WSIError`. Errors fall
into two families used by the CLI to pick an exit code: :class:`IoError`
(exit 3) and :class:`ValidationError` (exit 2).
"""


class WSIError(Exception):
    """Base class for all package errors."""


class ValidationError(WSIError, ValueError):
    """Inputs violate a documented precondition or invariant."""


class IoError(WSIError, OSError):
    """Reading or writing an artifact failed."""


# slide_io
class IoFailure(IoError):
    pass


class MissingLevel(IoError):
    pass


class CorruptRaster(IoError):
    pass


class DimensionMismatch(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class UnknownClass(ParseError):
    pass


class DegeneratePolygon(ParseError):
    pass


# pyramid
class DepthExceedsLevels(ValidationError):
    pass


class OutOfBounds(ValidationError):
    pass


class NotALeaf(ValidationError):
    pass


# batch generation / experts
class MissingClass(ValidationError):
    pass


class Exhausted(WSIError, RuntimeError):
    """A class pool is empty, so no balanced batch can be formed."""


class UntrainedExpert(ValidationError):
    pass


# fusion / metrics
class ShapeMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class EmptyMatrix(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyCounts(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass
