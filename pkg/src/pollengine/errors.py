"""Exception hierarchy shared across the engine.

Three families map onto the CLI exit codes: InputError -> 2,
NumericError -> 3, TransportError -> 4.
"""


class PollenError(Exception):
    """Base class for every error raised by this package."""


class InputError(PollenError):
    """Bad input data, files, or arguments."""


class ParameterError(InputError):
    """A parameter value is outside its allowed range."""


class DimensionError(InputError):
    """Array or image dimensions do not match what the operation needs."""


class GeometryError(InputError):
    """Degenerate or out-of-bounds geometry (contours, bboxes)."""


class BoundsError(InputError, IndexError):
    """An index is outside the valid range."""


class StorageError(InputError):
    """A file could not be read or written."""


class ParseError(InputError):
    """A text file failed to parse.

    Carries the 1-based line number and column of the offending token.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column}" if column is not None else "") + ")"
        super().__init__(message + where)


class VersionError(InputError):
    """A file declares a format version this build does not speak."""


class FormatError(InputError):
    """A binary file or weight blob is inconsistent with its declared config."""


class PreconditionError(InputError):
    """A documented operation precondition was violated."""


class NumericError(PollenError):
    """A computation diverged or produced non-finite values."""


class DegenerateInputError(NumericError):
    """Input is numerically degenerate (zero vector, antipodal mean, ...)."""


class TransportError(PollenError):
    """A failure talking to an external embedding service."""


class EmbedTimeoutError(TransportError):
    """No response from the external embedder within the timeout."""


class ProtocolError(TransportError):
    """The external embedder answered with something unparseable."""


class EmbedDimensionError(ProtocolError):
    """The external embedder returned a vector of the wrong dimension."""
