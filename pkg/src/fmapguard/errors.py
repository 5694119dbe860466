"""Exception hierarchy. The CLI maps each class to a distinct exit status."""


class FmapGuardError(Exception):
    exit_code = 1


class ShapeError(FmapGuardError, ValueError):
    """A tensor or layer shape is inconsistent; the message names the layer."""

    exit_code = 5


class NonFiniteError(FmapGuardError, ValueError):
    exit_code = 5


class DivergenceError(FmapGuardError, RuntimeError):
    """Training produced a non-finite loss."""

    exit_code = 6


class UndefinedMetricError(FmapGuardError, ValueError):
    exit_code = 5


class FormatError(FmapGuardError, ValueError):
    """A file is corrupt or truncated. ``offset`` is the byte offset when known."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(FmapGuardError, ValueError):
    """A persisted artifact carries an unknown schema name or version."""

    exit_code = 4
