"""Exception types shared across the package."""


class RaycalError(Exception):
    pass


class DegenerateRotation(RaycalError, ValueError):
    pass


class OutOfBounds(RaycalError, ValueError):
    pass


class BehindCamera(RaycalError, ValueError):
    pass


class NonConvergent(RaycalError, ArithmeticError):
    pass


class ParallelRays(RaycalError, ValueError):
    pass


class NonFinite(RaycalError, FloatingPointError):
    pass


class InsufficientGeometry(RaycalError, RuntimeError):
    pass


class DimensionMismatch(RaycalError, ValueError):
    pass


class TooSmall(RaycalError, ValueError):
    pass


class CountMismatch(RaycalError, ValueError):
    pass


class ParseError(RaycalError, ValueError):
    """Malformed artifact file. Carries the path and a line number or byte offset."""

    def __init__(self, message, path=None, line=None, offset=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.offset = offset
