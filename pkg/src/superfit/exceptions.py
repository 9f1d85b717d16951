"""Exception hierarchy shared across the package."""


class SuperfitError(Exception):
    """Base class for all package errors."""


class DimensionError(SuperfitError, ValueError):
    """Operand shapes are incompatible with an operation."""


class StatisticsError(SuperfitError, ValueError):
    """Batch statistics cannot be computed (e.g. batch of one in training mode)."""


class UsageError(SuperfitError, RuntimeError):
    """An API was called in a state or with arguments it does not accept."""


class ParameterError(SuperfitError, ValueError):
    """A hyperparameter is outside its valid range."""


class ConfigurationError(SuperfitError, ValueError):
    """An architecture or run configuration is inconsistent."""


class TrainingDivergedError(SuperfitError, FloatingPointError):
    """Training produced a non-finite loss."""


class FormatError(SuperfitError, ValueError):
    """A file does not follow the expected binary layout."""


class TruncatedFileError(FormatError):
    """A file ended before all declared records were read."""


class VersionError(FormatError):
    """A checkpoint was written by an unsupported format version."""


class ShapeMismatchError(FormatError):
    """Stored tensor shapes disagree with the declared architecture."""
