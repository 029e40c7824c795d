"""Exception hierarchy shared across the package."""


class SparseTuneError(Exception):
    """Base class for every error raised by this package."""


class StructuralError(SparseTuneError, ValueError):
    """Shapes or layer references that do not line up."""


class ContractError(SparseTuneError, RuntimeError):
    """A caller broke a documented precondition (e.g. stale activation cache)."""


class NumericError(SparseTuneError, ArithmeticError):
    """Non-finite values encountered; ``layer`` names the offender when known."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DivergenceError(NumericError):
    """Training produced a non-finite loss. ``params`` holds the last good weights."""

    def __init__(self, message, params=None, step=None):
        super().__init__(message)
        self.params = params
        self.step = step


class SamplingError(SparseTuneError, ValueError):
    """Dataset too small for the requested episode."""


class ConfigError(SparseTuneError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(SparseTuneError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class CheckpointShapeError(CheckpointError):
    pass


class ArtifactMismatchError(SparseTuneError):
    """An input artifact disagrees with the configuration or with another artifact."""
