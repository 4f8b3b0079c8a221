"""Exception hierarchy shared by all modules."""


class LrscatError(Exception):
    """Base class for all toolkit errors."""


class PreconditionError(LrscatError, ValueError):
    """An input violates a documented precondition (domain gate)."""


class InvalidModel(PreconditionError):
    """Model parameters fail validation at construction."""


class CalibrationFailed(LrscatError):
    pass


class StepSizeUnderflow(LrscatError):
    pass


class EnergyDriftExceeded(LrscatError):
    pass


class DegenerateDirection(LrscatError):
    pass


class NewtonDiverged(LrscatError):
    """Newton iteration failed; ``residual`` holds the last residual norm."""

    def __init__(self, message, residual=float("nan"), path=None):
        super().__init__(message)
        self.residual = residual
        self.path = path or []


class FixedPointDiverged(LrscatError):
    pass


class LimitNotConverged(LrscatError):
    pass


class SingularHessian(LrscatError):
    pass


class SurfaceDegenerate(LrscatError):
    pass


class TruncationWarning(UserWarning):
    pass


class InsufficientRange(LrscatError, ValueError):
    pass


class QuadratureFailure(LrscatError):
    pass


class SchemaError(LrscatError, ValueError):
    """Configuration error located by a JSON pointer."""

    def __init__(self, pointer, message):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer
        self.reason = message
