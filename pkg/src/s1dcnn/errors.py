"""Exception types shared across the package."""


class S1dcnnError(Exception):
    """Base class for all package errors."""


class ShapeError(S1dcnnError, ValueError):
    """Array dimensions do not agree."""


class EmptyInputError(S1dcnnError, ValueError):
    """Input too short to produce any output."""


class ConfigError(S1dcnnError, ValueError):
    """Invalid model configuration."""


class FormatError(S1dcnnError, ValueError):
    """Malformed file contents.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(S1dcnnError, RuntimeError):
    """Operation called in the wrong state (e.g. backward without a forward cache)."""


class DataError(S1dcnnError, ValueError):
    """Inconsistent data, such as a label index outside the utterance."""


class TrainingDivergedError(S1dcnnError, RuntimeError):
    """Loss became non-finite during training."""
