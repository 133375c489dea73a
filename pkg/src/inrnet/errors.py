"""Exception types shared across the engine."""


class InrNetError(Exception):
    """Base class for engine errors."""


class UnsupportedDimensionError(InrNetError):
    pass


class DomainMismatchError(InrNetError):
    pass


class InsufficientPointsError(InrNetError):
    pass


class CannotExtendError(InrNetError):
    pass


class EmptyInputError(InrNetError):
    pass


class ShapeError(InrNetError, ValueError):
    pass


class RankError(InrNetError, ValueError):
    pass


class NumericError(InrNetError, FloatingPointError):
    pass


class FormatError(InrNetError):
    """Malformed serialized model or graph."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ConversionError(InrNetError):
    pass


class GraphError(InrNetError):
    """Invalid network graph (cycle, channel or signature mismatch)."""


class UnsupportedError(InrNetError):
    pass


class InvalidRegionsError(InrNetError):
    pass


class UnsupportedTargetError(InrNetError):
    pass


class ConfigError(InrNetError):
    pass


class DivergenceError(InrNetError):
    pass
