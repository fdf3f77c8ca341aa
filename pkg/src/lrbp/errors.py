"""Exception hierarchy shared across the package."""


class LRBPError(Exception):
    """Base class for all errors raised by lrbp."""


class DimensionError(LRBPError, ValueError):
    """Array shapes are inconsistent with each other or with the model."""


class DataError(LRBPError, ValueError):
    """Input values are invalid (non-finite entries, bad labels, ...)."""


class FormatError(LRBPError):
    """A file does not follow the expected container layout."""


class UnsupportedVersionError(FormatError):
    pass


class CorruptionError(FormatError):
    """A file ended early or carries inconsistent counts.

    ``offset`` is the byte position at which reading failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParseError(LRBPError, ValueError):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line
