"""Exception types shared by the library and the command line."""


class SPDEError(Exception):
    pass


class InvalidArgument(SPDEError, ValueError):
    pass


class InvalidState(SPDEError, RuntimeError):
    pass


class NumericalFailure(SPDEError, FloatingPointError):
    """Raised when the scheme produces non-finite values.

    ``step`` is the index of the step whose output was non-finite and
    ``failed`` the number of Monte Carlo samples affected (1 for a single path).
    """

    def __init__(self, message, step=None, failed=1):
        super().__init__(message)
        self.step = step
        self.failed = failed
