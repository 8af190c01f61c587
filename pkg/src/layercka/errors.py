"""Exception hierarchy shared by every module."""


class LayerCKAError(Exception):
    """Base class for all errors raised by layercka."""


class DimensionMismatch(LayerCKAError, ValueError):
    pass


class TooFewExamples(LayerCKAError, ValueError):
    pass


class ZeroVariance(LayerCKAError, ValueError):
    """A representation has no centered variance, so CKA is undefined."""


class ManifestMismatch(LayerCKAError, ValueError):
    pass


class FormatError(LayerCKAError, ValueError):
    """A binary or text artifact is malformed, truncated or corrupted."""


class SequenceTooLong(LayerCKAError, ValueError):
    pass


class EmptyDataset(LayerCKAError, ValueError):
    pass


class InvalidToken(LayerCKAError, ValueError):
    pass


class InvalidMode(LayerCKAError, ValueError):
    pass


class ModeMismatch(LayerCKAError, ValueError):
    """A trace was produced without the intermediates backward needs."""


class StepOutOfRange(LayerCKAError, ValueError):
    pass


class LayerRangeError(LayerCKAError, ValueError):
    pass


class TooFewLayers(LayerCKAError, ValueError):
    pass


class UndefinedCells(LayerCKAError, ValueError):
    pass


class ConfigError(LayerCKAError, ValueError):
    pass
