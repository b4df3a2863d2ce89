"""Exception hierarchy shared across the toolkit."""


class QNNError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QNNError, ValueError):
    """Operand shapes do not compose."""


class NumericError(QNNError, ArithmeticError):
    """A non-finite value appeared at an op boundary, or training diverged."""


class GraphStateError(QNNError, RuntimeError):
    """The autodiff graph was used out of order (e.g. backward before forward)."""


class PrecisionError(QNNError, ValueError):
    """A value that must be exactly representable (e.g. +-1 for packing) is not."""


class ConfigError(QNNError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class ParseError(QNNError, ValueError):
    """A binary or text input file is malformed.

    ``offset`` is the byte offset (or line number for text files) where
    parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class StageError(QNNError, RuntimeError):
    """A pipeline stage failed; carries the stage name for resume."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
