"""Exception hierarchy shared by all gridkernel modules."""


class GridKernelError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class ValidationError(GridKernelError, ValueError):
    """Input failed a structural or range check."""

    exit_code = 2


class CaseParseError(ValidationError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TopologyError(ValidationError):
    pass


class RegistryError(ValidationError):
    pass


class NumericalError(GridKernelError, ArithmeticError):
    """A numerical routine failed (factorization, convergence)."""

    exit_code = 3


class ConditioningError(NumericalError):
    pass


class InitializationError(NumericalError):
    pass


class DatasetError(NumericalError):
    pass
