"""Exception hierarchy shared by every pointca module."""


class PointCAError(Exception):
    """Base class for all pointca errors."""


class InvalidParam(PointCAError, ValueError):
    pass


class TooFewPoints(PointCAError, ValueError):
    pass


class SizeMismatch(PointCAError, ValueError):
    pass


class EmptyCloud(PointCAError, ValueError):
    pass


class TooLargeForExact(PointCAError, ValueError):
    pass


class ZeroDenominator(PointCAError, ZeroDivisionError):
    pass


class EmptyInput(PointCAError, ValueError):
    pass


class ShapeMismatch(PointCAError, ValueError):
    pass


class NotScalar(PointCAError, ValueError):
    pass


class StaleTape(PointCAError, RuntimeError):
    """Raised when backward() is called twice on the same recorded graph."""


class EmptyDataset(PointCAError, ValueError):
    pass


class VersionMismatch(PointCAError, ValueError):
    """Weight file has the wrong magic bytes or format version."""


class ModelUntrained(PointCAError, RuntimeError):
    pass


class InvalidConfig(PointCAError, ValueError):
    pass


class AllPointsRemoved(PointCAError, ValueError):
    pass


class InvalidSpec(PointCAError, ValueError):
    pass


class InvalidViewpoint(PointCAError, ValueError):
    pass


class TooFewClasses(PointCAError, ValueError):
    pass


class ParseError(PointCAError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(PointCAError, ValueError):
    """Missing or inconsistent files on disk."""
