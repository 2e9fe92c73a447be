"""Exception hierarchy. Every error carries a machine-parsable class name."""


class NsDiffError(Exception):
    error_class = "internal-error"

    def line(self) -> str:
        """Single-line `<error_class>: <detail>` rendering used by the CLI."""
        detail = " ".join(str(self).split())
        return f"{self.error_class}: {detail}"


class ConfigurationError(NsDiffError, ValueError):
    error_class = "config-error"


class ShapeError(NsDiffError, ValueError):
    error_class = "shape-error"


class DataFormatError(NsDiffError):
    error_class = "data-format"


class InsufficientDataError(NsDiffError):
    error_class = "insufficient-data"


class TrainingError(NsDiffError):
    error_class = "training-diverged"


class SolverError(NsDiffError):
    error_class = "solver-error"

    def __init__(self, message: str, t: int, lambda0, lambda1, lambda2):
        super().__init__(message)
        self.t = t
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.lambda2 = lambda2


class CheckpointFormatError(NsDiffError):
    error_class = "checkpoint-format"


class MissingArtifactError(NsDiffError):
    error_class = "missing-artifact"


class BackwardBeforeForwardError(NsDiffError, RuntimeError):
    error_class = "internal-error"
