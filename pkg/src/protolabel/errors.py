"""Exception hierarchy shared by all protolabel modules."""


class ProtolabelError(Exception):
    """Base class for every error raised by this package."""


class DataValidityError(ProtolabelError, ValueError):
    """Input data violates a documented invariant (NaN points, bad poses, ...)."""


class ConfigError(ProtolabelError, ValueError):
    """A configuration value is out of range or inconsistent."""


class ParseError(ProtolabelError, ValueError):
    """A file could not be decoded.

    Attributes:
        path: offending file.
        offset: byte offset of the first malformed record, when known.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class MissingFileError(ProtolabelError, FileNotFoundError):
    """A referenced file does not exist."""

    def __init__(self, path, context=""):
        self.path = path
        msg = f"file not found: {path}"
        if context:
            msg += f" (referenced by {context})"
        super().__init__(msg)


class UndefinedStatisticError(ProtolabelError, ValueError):
    """A mean or ratio was requested over an empty set."""


class NumericDomainError(ProtolabelError, ArithmeticError):
    """An operation is undefined for the given numeric input (e.g. zero-norm vector)."""


class StageError(ProtolabelError):
    """A pipeline stage failed; carries the stage name and offending file."""

    def __init__(self, stage, message, path=None):
        self.stage = stage
        self.path = path
        text = f"[{stage}] {message}"
        if path is not None:
            text += f" ({path})"
        super().__init__(text)
