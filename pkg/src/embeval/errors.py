from __future__ import annotations


class EmbevalError(ValueError):
    """Base class for data and parameter errors raised by the toolkit."""


class FormatError(EmbevalError):
    """A file does not conform to its declared format."""

    def __init__(self, message: str, path=None, row: int | None = None):
        self.path = path
        self.row = row
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        prefix = f"{': '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ZeroNormError(EmbevalError):
    """An embedding row has zero L2 norm where a direction is required."""

    def __init__(self, message: str, ids: list[str] | None = None):
        self.ids = list(ids or [])
        super().__init__(message)


class DimensionError(EmbevalError):
    """Two embeddings or matrices disagree on dimensionality."""


class UnknownIdError(EmbevalError):
    """An id could not be resolved against a loaded matrix."""
