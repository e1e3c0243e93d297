"""Exception hierarchy shared across the package."""


class CirlError(Exception):
    """Base class for all errors raised by cirl_lab."""


class DomainError(CirlError, ValueError):
    pass


class SingularVolumeError(CirlError, ValueError):
    pass


class DivergenceError(CirlError, ArithmeticError):
    """Integration produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ProtocolError(CirlError, RuntimeError):
    pass


class ShapeError(CirlError, ValueError):
    pass


class SingularityError(CirlError, ArithmeticError):
    pass


class NonConvergenceError(CirlError, RuntimeError):
    pass


class ScheduleBoundsError(CirlError, IndexError):
    pass


class SchemaError(CirlError, ValueError):
    pass
