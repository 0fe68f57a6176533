"""Exception hierarchy shared by the numeric services and the CLI."""


class LabError(Exception):
    """Base class for every error raised by editlab."""


class DomainError(LabError, ValueError):
    """An argument lies outside the domain of an operation (range, dimension)."""


class ConditionError(LabError):
    """A condition cannot be resolved against the mixture model."""


class ConfigError(LabError):
    """An experiment configuration is missing, unreadable or inconsistent."""

    def __init__(self, message: str, errors: list[str] | None = None):
        super().__init__(message)
        self.errors = errors or []


class DivergenceError(LabError):
    """An iterative procedure (inversion refinement, drag descent) blew up."""


class NumericalError(LabError):
    """A non-finite value appeared where a finite one is required."""


class HookAbort(LabError):
    """Raised by a step hook to stop a reverse run early."""
