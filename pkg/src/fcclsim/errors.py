"""Exception hierarchy shared by every module."""

from __future__ import annotations


class FcclError(Exception):
    """Base class for all simulator errors."""


class ShapeError(FcclError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(FcclError, ValueError):
    """A scalar argument or label is outside its valid range."""


class StateError(FcclError, RuntimeError):
    """An object was used in a state that no longer matches its origin (e.g. a stale cache)."""


class ConfigError(FcclError, ValueError):
    """An experiment configuration is malformed or inconsistent."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field {field!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class NumericAbort(FcclError, RuntimeError):
    """A loss became non-finite during training; carries a diagnostic record."""

    def __init__(self, message: str, diagnostic: dict | None = None):
        self.diagnostic = dict(diagnostic or {})
        super().__init__(message)
