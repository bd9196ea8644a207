"""Exception types raised across the package."""

from __future__ import annotations


class PVHError(Exception):
    """Base class for all package errors."""


class BehindCamera(PVHError):
    pass


class EmptyViewList(PVHError, ValueError):
    pass


class UnsupportedFactor(PVHError, ValueError):
    pass


class ShapeMismatch(PVHError, ValueError):
    pass


class InconsistentOutputShape(ShapeMismatch):
    pass


class NonScalarLoss(PVHError, ValueError):
    pass


class UnrealizableSchedule(PVHError, ValueError):
    pass


class EmptyDataset(PVHError, ValueError):
    pass


class DivergedLoss(PVHError, RuntimeError):
    pass


class WrongInputResolution(ShapeMismatch):
    pass


class CycleDetected(PVHError, ValueError):
    pass


class LengthMismatch(PVHError, ValueError):
    pass


class BadSubset(PVHError, ValueError):
    pass


class ConfigError(PVHError, ValueError):
    """Validation failure; ``field`` and ``source`` name the offending input."""

    def __init__(self, message: str, field: str | None = None, source: str | None = None):
        self.field = field
        self.source = source
        parts = [message]
        if field is not None:
            parts.append(f"field={field!r}")
        if source is not None:
            parts.append(f"source={source!r}")
        super().__init__("; ".join(parts) if len(parts) > 1 else message)


class UnknownFlag(ConfigError):
    pass


class MissingFile(ConfigError):
    pass


class SchemaViolation(ConfigError):
    def __init__(self, message: str, field: str | None = None, source: str | None = None,
                 line: int | None = None):
        self.line = line
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message, field=field, source=source)


class CorruptHeader(SchemaViolation):
    pass


class TruncatedData(SchemaViolation):
    pass
