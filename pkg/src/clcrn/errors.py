"""Exception types raised across the package."""


class CLCRNError(Exception):
    """Base class for all package errors."""


class DegenerateMap(CLCRNError):
    pass


class PoleCenter(CLCRNError):
    pass


class NotAPole(CLCRNError):
    pass


class TooFewNodes(CLCRNError):
    pass


class DuplicatePoints(CLCRNError):
    pass


class EmptyNeighborhood(CLCRNError):
    pass


class ShapeMismatch(CLCRNError, ValueError):
    pass


class NotScalarLoss(CLCRNError):
    pass


class NotTraced(CLCRNError):
    pass


class GeometryMismatch(CLCRNError):
    pass


class MissingTruth(CLCRNError):
    pass


class EmptySplit(CLCRNError):
    pass


class Diverged(CLCRNError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")


class MissingFile(CLCRNError, FileNotFoundError):
    pass


class SizeMismatch(CLCRNError):
    def __init__(self, expected: int, actual: int, what: str = "signals blob"):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected} bytes, found {actual} bytes")


class BadCoordinate(CLCRNError, ValueError):
    pass


class ZeroStd(CLCRNError):
    pass


class StabilityViolated(CLCRNError):
    pass


class CheckpointError(CLCRNError):
    pass
