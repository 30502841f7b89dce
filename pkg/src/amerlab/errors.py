"""Exception hierarchy.

Everything raised deliberately by the library derives from ``AmerError`` so the
CLI can map it to the data/validation exit code.
"""


class AmerError(Exception):
    pass


class ConfigError(AmerError, ValueError):
    pass


class FormatError(AmerError, ValueError):
    """A file on disk does not match its declared binary layout."""


class ZeroVector(AmerError, ValueError):
    pass


class DimMismatch(AmerError, ValueError):
    pass


class ShapeMismatch(AmerError, ValueError):
    pass


class CountMismatch(AmerError, ValueError):
    pass


class NonFinite(AmerError, ValueError):
    pass


class NonFiniteLoss(NonFinite):
    pass


class DivergedLoss(NonFinite):
    pass


class OrthogonalizationFailed(AmerError, RuntimeError):
    pass


class CorpusTooSmall(AmerError, ValueError):
    pass


class EmptyCorpus(AmerError, ValueError):
    pass


class NonUnitEntry(AmerError, ValueError):
    pass


class TooLarge(AmerError, ValueError):
    pass


class TooLong(AmerError, ValueError):
    pass


class NoRecordedForward(AmerError, RuntimeError):
    pass


class PositiveNotInBatch(AmerError, ValueError):
    pass


class EmptyTargets(AmerError, ValueError):
    pass


class SingleTarget(AmerError, ValueError):
    pass


class SinglePrediction(AmerError, ValueError):
    pass


class MissingCorpusIds(AmerError, ValueError):
    pass
