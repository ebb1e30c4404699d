"""EgoWorld core: exception hierarchy."""

from __future__ import annotations


class EgoWorldError(Exception):
    """Base class for every error raised by egoworld."""

    exit_code = 3


class ConfigError(EgoWorldError):
    exit_code = 1

    def __init__(self, message: str, field: str = "", line: int | None = None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.field = field
        self.line = line


class FormatError(EgoWorldError):
    """Bad magic, unsupported version or truncated binary file."""

    exit_code = 2


class DataError(EgoWorldError):
    exit_code = 2


class NumericalError(EgoWorldError):
    """NaN/Inf inputs or numerically invalid statistics."""

    exit_code = 3


class TrainingAborted(EgoWorldError):
    exit_code = 3
