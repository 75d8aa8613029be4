"""Exception hierarchy shared by every module."""

from __future__ import annotations


class FCBAError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(FCBAError, ValueError):
    """Invalid or inconsistent configuration values."""


class LayoutError(FCBAError, ValueError):
    """Two parameter vectors do not share the same segment layout."""


class AggregationError(LayoutError):
    pass


class NumericError(FCBAError, ArithmeticError):
    """A non-finite value appeared during a forward or backward pass."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class IngestionError(FCBAError, OSError):
    """Base class for dataset file problems; carries the offending path."""

    def __init__(self, message: str, path=None):
        super().__init__(f"{path}: {message}" if path is not None else message)
        self.path = path


class BadMagicError(IngestionError):
    pass


class TruncatedFileError(IngestionError):
    pass


class CountMismatchError(IngestionError):
    pass


class EmptyDatasetError(ConfigurationError):
    pass


class AlignmentInfeasibleError(FCBAError, ValueError):
    """Poison-budget alignment would need a fractional poison count."""


class UndefinedMetricError(FCBAError, ValueError):
    pass


class ConfigParseError(ConfigurationError):
    """Config file problem, positioned at a key and line when known."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = (", ".join(where) + ": ") if where else ""
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class RoundError(FCBAError):
    """Wraps a component failure with the round index it happened in."""

    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"round {round_index}: {cause}")
        self.round_index = round_index
        self.cause = cause
