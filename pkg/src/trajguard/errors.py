"""Exception hierarchy shared across the package."""


class TrajguardError(Exception):
    """Base class for all package errors."""


class ConfigError(TrajguardError, ValueError):
    pass


class LengthMismatch(TrajguardError, ValueError):
    pass


class ShapeMismatch(LengthMismatch):
    pass


class DimMismatch(LengthMismatch):
    pass


class ZeroNormVector(TrajguardError, ValueError):
    pass


class EmptyVector(TrajguardError, ValueError):
    pass


class EmptyData(TrajguardError, ValueError):
    pass


class InsufficientData(TrajguardError, ValueError):
    pass


class InsufficientHistory(TrajguardError, ValueError):
    pass


class EmptySequence(TrajguardError, ValueError):
    pass


class NoUpdates(TrajguardError, ValueError):
    pass


class TooFewClients(TrajguardError, ValueError):
    pass


class BadM(TrajguardError, ValueError):
    pass


class ParseError(TrajguardError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(TrajguardError, ValueError):
    pass


class RangeError(TrajguardError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class RoundFailure(TrajguardError, RuntimeError):
    """Raised by the orchestrator when a round cannot complete."""

    def __init__(self, round_index: int, cause: BaseException):
        self.round_index = round_index
        self.cause = cause
        super().__init__(f"round {round_index} failed: {cause!r}")
