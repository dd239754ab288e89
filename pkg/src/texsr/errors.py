"""Exception taxonomy shared by all texsr modules.

The CLI maps these onto process exit codes: numerical failures -> 1,
usage/parameter/structural problems -> 2, file problems -> 3.
"""


class TexsrError(Exception):
    """Base class for all texsr errors."""


class StructuralError(TexsrError, ValueError):
    """Shapes or dimensions of otherwise valid objects do not fit together."""


class ParameterError(TexsrError, ValueError):
    """A parameter value is outside its admissible range."""


class UsageError(TexsrError, RuntimeError):
    """An operation was invoked in a state or sequence it does not support."""


class ParseError(TexsrError, ValueError):
    """A file could not be decoded. Carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(TexsrError, RuntimeError):
    """A non-finite value was produced where finiteness is guaranteed."""
