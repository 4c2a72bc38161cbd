"""Exception hierarchy shared by all renn modules."""


class RennError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(RennError, ValueError):
    """Invalid configuration (channel counts, hyperparameters, config keys)."""


class PreconditionError(RennError, ValueError):
    """An operation was called on input that violates its precondition."""


class UsageError(RennError, RuntimeError):
    """An API was used out of order (missing cache, unfrozen model, ...)."""


class WeightsFormatError(RennError):
    """Base class for weights-file load failures."""


class ChecksumError(WeightsFormatError):
    pass


class VersionError(WeightsFormatError):
    pass


class ConfigMismatchError(WeightsFormatError):
    pass


class DatasetParseError(RennError):
    """Base class for dataset read failures."""


class MalformedRowError(DatasetParseError):
    pass


class LabelOrderError(DatasetParseError):
    pass


class SampleRateMismatchError(DatasetParseError):
    pass
