"""Exception hierarchy shared by the library and the CLI."""


class MrpError(Exception):
    """Base class for every error raised by mrpalloc."""

    exit_code = 1


class ValidationError(MrpError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    """Two arrays that must agree in shape do not."""

    def __init__(self, message, *shapes):
        super().__init__(f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes))
        self.shapes = shapes


class ConfigurationError(ValidationError):
    pass


class InfeasibleError(MrpError):
    """The requested allocation cannot be reached."""

    exit_code = 3

    def __init__(self, message, achieved=None):
        if achieved is not None:
            message = f"{message} (achieved global sparsity {achieved:.6f})"
        super().__init__(message)
        self.achieved = achieved


class AllocationExhaustedError(InfeasibleError):
    pass


class StorageError(MrpError, OSError):
    exit_code = 4


class LoadError(StorageError):
    """A tensor or report file is missing, malformed, or inconsistent."""
