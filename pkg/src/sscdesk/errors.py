"""Exception types raised across the package."""


class SSCError(Exception):
    pass


class ShapeMismatch(SSCError, ValueError):
    pass


class NonScalarLoss(SSCError, ValueError):
    pass


class NonFiniteValue(SSCError, FloatingPointError):
    pass


class NonPositiveDepth(SSCError, ValueError):
    pass


class BehindCamera(SSCError, ValueError):
    pass


class IndivisibleGroups(SSCError, ValueError):
    pass


class IndexOutOfRange(SSCError, IndexError):
    pass


class AllIgnored(SSCError, ValueError):
    pass


class NonFinitePart(SSCError, ValueError):
    pass


class NonFiniteLoss(SSCError, RuntimeError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class DimMismatch(SSCError, ValueError):
    pass


class ConfigError(SSCError, ValueError):
    pass


class FormatError(SSCError, ValueError):
    pass
