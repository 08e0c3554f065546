"""Exception types raised across the package."""


class MetaFusionError(Exception):
    """Base class for all package errors."""


class SingularSystem(MetaFusionError):
    pass


class InvalidRank(MetaFusionError):
    pass


class TooFewPoints(MetaFusionError):
    pass


class SingleCluster(MetaFusionError):
    pass


class InvalidConfig(MetaFusionError):
    pass


class InvalidDims(MetaFusionError):
    pass


class NotFitted(MetaFusionError):
    pass


class NonFiniteLoss(MetaFusionError):
    pass


class ShapeMismatch(MetaFusionError):
    pass


class EmptyPool(MetaFusionError):
    pass


class MethodTaskMismatch(MetaFusionError):
    pass


class UnknownPreset(MetaFusionError):
    pass


class FormatError(MetaFusionError):
    """Raised when a serialized artifact cannot be parsed."""
