"""Exception hierarchy shared by every module of the package."""


class DistillError(Exception):
    """Base class for all errors raised by stagedistill."""


class InputError(DistillError, ValueError):
    """Malformed tensors, shapes or labels passed to an operation."""


class NonFiniteError(InputError):
    """An input tensor holds NaN or infinite entries."""


class ParameterError(DistillError, ValueError):
    """A hyperparameter outside its valid range (temperature, K, ...)."""


class ConfigError(DistillError, ValueError):
    """Invalid network spec, run configuration or generator parameters."""


class TrainingError(DistillError, RuntimeError):
    """Training diverged or a cascade rung failed.

    ``last_good`` holds the most recent finite weights, when available.
    """

    def __init__(self, message, last_good=None, rung=None):
        super().__init__(message)
        self.last_good = last_good
        self.rung = rung


class ReportingError(DistillError, RuntimeError):
    """A report was requested from an incomplete run directory."""
