"""Exception types shared across the package.

The CLI maps these onto exit codes: InputError/ParseError -> 2,
NumericError -> 3, everything else is a plain crash.
"""


class StreamTrackError(Exception):
    """Base class for all package errors."""


class ShapeError(StreamTrackError, ValueError):
    """Operand dimensions are inconsistent."""


class ParameterError(StreamTrackError, ValueError):
    """A scalar/config parameter is out of its allowed range."""


class ContractError(StreamTrackError, RuntimeError):
    """An API precondition was violated (e.g. non-scalar loss, out-of-order frame)."""


class InputError(StreamTrackError, ValueError):
    """User-supplied data is invalid (bad frame size, point outside frame, ...)."""


class DataError(StreamTrackError, ValueError):
    """Ground-truth data is inconsistent (e.g. visible point outside the frame)."""


class NumericError(StreamTrackError, ArithmeticError):
    """A computation produced NaN/Inf or an otherwise unusable value."""


class ParseError(StreamTrackError, ValueError):
    """A serialized container is malformed.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(ParseError):
    """A serialized container has an unsupported version."""
