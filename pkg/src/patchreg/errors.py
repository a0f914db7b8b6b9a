"""Exception types shared across the package."""


class PatchRegError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PatchRegError, ValueError):
    pass


class NotScalar(PatchRegError, ValueError):
    pass


class DimsNotDivisible(PatchRegError, ValueError):
    pass


class WrongPatchCount(PatchRegError, ValueError):
    pass


class HeaderMismatch(PatchRegError, ValueError):
    pass


class UnsupportedDtype(PatchRegError, ValueError):
    pass


class InvalidSpec(PatchRegError, ValueError):
    pass


class TooFewPatches(PatchRegError, ValueError):
    pass


class NonFiniteLoss(PatchRegError, FloatingPointError):
    """Raised when a training loss turns NaN/Inf.

    ``epoch`` and ``step`` locate the offending update.
    """

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class MissingGradient(PatchRegError, RuntimeError):
    pass


class ConfigError(PatchRegError, ValueError):
    pass
