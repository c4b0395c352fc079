"""Exception and warning types raised across the toolkit."""


class SynthError(Exception):
    """Base class for all toolkit errors."""


class DataError(SynthError):
    """Input data is missing, malformed, or violates an invariant."""


class MissingFile(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class MalformedManifest(DataError):
    pass


class EmptyInstance(DataError):
    pass


class MaskAllBackground(DataError):
    pass


class NoValidDepth(DataError):
    pass


class LabelMapMissing(DataError):
    pass


class InvalidDepth(SynthError, ValueError):
    pass


class OutOfBounds(SynthError, ValueError):
    pass


class NoValidPlacement(SynthError):
    pass


class EmptySeedRegion(SynthError):
    pass


class NonConvergenceWarning(RuntimeWarning):
    pass


class RefinementWarning(RuntimeWarning):
    pass
