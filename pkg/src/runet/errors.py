"""Exception hierarchy shared by every module of the package."""


class RunetError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(RunetError, ValueError):
    pass


class InvalidConfigError(RunetError, ValueError):
    pass


class InvalidDataError(RunetError, ValueError):
    pass


class ContractViolation(RunetError, RuntimeError):
    """Raised when a caller breaks an API precondition (e.g. non-scalar loss)."""


class CheckpointFormatError(RunetError):
    pass


class DivergenceError(RunetError, FloatingPointError):
    """Training produced a non-finite loss."""
