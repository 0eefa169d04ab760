"""Exception types raised across the codec."""


class PCGCError(Exception):
    """Base class for all codec errors."""


class ShapeMismatch(PCGCError, ValueError):
    pass


class DuplicateCoordinate(PCGCError, ValueError):
    pass


class ChannelMismatch(PCGCError, ValueError):
    pass


class UnknownCoordinate(PCGCError, KeyError):
    pass


class OutOfExtent(PCGCError, ValueError):
    pass


class EmptyInput(PCGCError, ValueError):
    pass


class CoordOutOfRange(PCGCError, ValueError):
    pass


class CorruptPayload(PCGCError, ValueError):
    pass


class NonFiniteInput(PCGCError, ValueError):
    pass


class NonScalarLoss(PCGCError, ValueError):
    pass


class EmptyDataset(PCGCError, ValueError):
    pass


class EmptyCloud(PCGCError, ValueError):
    pass


class ZeroPoints(PCGCError, ValueError):
    pass


class InsufficientPoints(PCGCError, ValueError):
    pass


class NoOverlap(PCGCError, ValueError):
    pass


class MalformedHeader(PCGCError, ValueError):
    pass


class UnsupportedFormat(PCGCError, ValueError):
    pass


class MissingProperty(PCGCError, ValueError):
    pass


class ModelMismatch(PCGCError, ValueError):
    pass


class DegenerateNeighborhood(UserWarning):
    """Warned (not raised) when a normal is estimated from a rank-deficient neighborhood."""
