"""Exception types shared across the package."""


class TwinError(Exception):
    pass


class EmptySeries(TwinError):
    pass


class InvalidInterval(TwinError):
    pass


class InsufficientHistory(TwinError):
    pass


class ShapeError(TwinError, ValueError):
    pass


class ParseError(TwinError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CatalogError(TwinError):
    pass


class ConfigError(TwinError, ValueError):
    pass


class CellAsleep(TwinError):
    pass


class IllegalAction(TwinError):
    pass


class SimulatorInvariantViolation(TwinError):
    pass


class ProjectionError(TwinError):
    pass


class NumericError(TwinError, ArithmeticError):
    pass


class RegenFailed(TwinError):
    pass


class DegenerateTarget(UserWarning):
    """Emitted when a training target column is constant; the model stores the constant."""

    def __init__(self, column):
        self.column = column
        super().__init__(f"constant target column {column!r}")
