"""Exception types raised across the library."""


class OccdetError(Exception):
    """Base class for every error raised by occdet."""


class ShapeMismatch(OccdetError, ValueError):
    pass


class RankMismatch(ShapeMismatch):
    pass


class InvalidHyperparam(OccdetError, ValueError):
    pass


class NonDeterministicLayer(OccdetError, RuntimeError):
    pass


class DuplicateName(OccdetError, KeyError):
    pass


class UnknownPoolFn(OccdetError, KeyError):
    pass


class EmptyVoxel(OccdetError, ValueError):
    pass


class WindowTooLarge(OccdetError, ValueError):
    pass


class NonUnitLiftedAxis(ShapeMismatch):
    pass


class StaleFold(OccdetError, RuntimeError):
    pass


class DegenerateRoi(OccdetError, ValueError):
    pass


class InvalidSpec(OccdetError, ValueError):
    pass


class DivergedLoss(OccdetError, FloatingPointError):
    def __init__(self, message, seed=None):
        super().__init__(message)
        self.seed = seed


class MissingCheckpoint(OccdetError, FileNotFoundError):
    pass
