"""Exception hierarchy shared by all asyncgp modules."""


class AsyncGPError(Exception):
    """Base class for every error raised by this package."""


class InputError(AsyncGPError, ValueError):
    """Invalid argument, dimension mismatch or malformed configuration."""


class NumericError(AsyncGPError, ArithmeticError):
    """A computation produced non-finite values or a factorization failed."""


class ContractError(AsyncGPError):
    """A documented precondition between components was violated."""


class NotApplicableError(AsyncGPError):
    """The requested quantity is not defined for this kind of result."""


class ResourceError(AsyncGPError):
    """A configured resource bound (e.g. event budget) was exceeded."""


class DivergenceError(NumericError):
    """A simulated trajectory blew up."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time
