"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Bad argument: wrong shape, size, or value."""


class ValidationError(ValueError):
    """Input data violates a documented invariant."""


class InternalError(RuntimeError):
    """Broken internal consistency (cycles, divisibility after padding, ...)."""


class ParseError(ValueError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UsageError(Exception):
    """Caller violated a command or stage precondition."""


class MissingPrerequisiteError(UsageError):
    """A required checkpoint or artifact is absent."""


class IncompatibleArtifactError(UsageError):
    """Artifacts that cannot be combined (kernel size, channel count, ...)."""
