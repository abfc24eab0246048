"""Exception hierarchy shared by every module in the package."""


class BGCError(Exception):
    """Base class for all errors raised by bgcond."""


class BundleIncomplete(BGCError):
    pass


class BundleCorrupt(BGCError):
    pass


class InvalidParams(BGCError, ValueError):
    pass


class NodeOutOfRange(BGCError, IndexError):
    pass


class ShapeError(BGCError, ValueError):
    pass


class NotScalar(BGCError, ValueError):
    pass


class TapeConsumed(BGCError, RuntimeError):
    """Raised when backward is run a second time on the same tape."""


class EmptyMask(BGCError, ValueError):
    pass


class SecondOrderUnsupported(BGCError, NotImplementedError):
    pass


class AdjacencyRequired(BGCError, ValueError):
    pass


class StructureModeMismatch(BGCError, ValueError):
    pass


class TooFewPoints(BGCError, ValueError):
    pass


class NothingToPoison(BGCError, ValueError):
    pass


class ConfigError(BGCError, ValueError):
    pass
