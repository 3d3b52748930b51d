"""Exception hierarchy shared by all modules."""


class GeodisaggError(Exception):
    """Base class for all package errors."""


class StructuralError(GeodisaggError):
    """Inconsistent problem geometry (areas, cells, memberships)."""


class InputError(GeodisaggError):
    """Malformed input file or configuration value.

    ``path``, ``line`` and ``column`` are filled in when the error comes from a
    file so the CLI can print a precise location.
    """

    def __init__(self, message, path=None, line=None, column=None):
        self.path = path
        self.line = line
        self.column = column
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = ":".join(where[:1]) + (f" ({', '.join(where[1:])})" if len(where) > 1 else "")
        super().__init__(f"{prefix}: {message}" if prefix else message)


class NumericalError(GeodisaggError):
    """Factorization failure or non-finite values during fitting."""


class FitError(GeodisaggError):
    """Every restart of the hyperparameter search failed."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
