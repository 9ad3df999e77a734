"""Exception hierarchy shared by the library and the command line."""


class MMFSError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(MMFSError, ValueError):
    exit_code = 1


class ParseError(MMFSError, ValueError):
    """Malformed SVMlight input. Carries the 1-based line number."""

    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StateError(MMFSError, ValueError):
    """Operation applied to data in the wrong normalization state."""


class ShapeError(MMFSError, ValueError):
    pass


class DomainError(MMFSError, ValueError):
    """Argument outside its mathematical domain."""


class InfeasibleError(MMFSError, ValueError):
    pass


class CapacityError(MMFSError):
    """Request exceeds a configured dense-path limit."""

    exit_code = 4


class DegenerateModelWarning(UserWarning):
    """Classifier trained on a single class; it predicts the majority label."""
