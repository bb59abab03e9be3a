"""Exception types raised across the package."""


class PAAConvError(Exception):
    """Base class for all package errors."""


class InvalidInputError(PAAConvError, ValueError):
    pass


class ShapeError(PAAConvError, ValueError):
    pass


class ConfigError(PAAConvError, ValueError):
    pass


class DegenerateNeighborhoodError(PAAConvError, ValueError):
    """Neighbourhood too small or collinear to define a plane."""


class UndefinedMetricError(PAAConvError, ValueError):
    pass


class TapeStateError(PAAConvError, RuntimeError):
    """Backward requested on a tape with nothing recorded."""


class ParseError(PAAConvError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
