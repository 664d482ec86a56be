"""Exception hierarchy.

Everything derives from :class:`RobNoddiError`. Errors that describe a bad
value also derive from :class:`ValueError` so callers that only know about
builtin exceptions still catch them.
"""


class RobNoddiError(Exception):
    """Base class for all package errors."""


class DomainError(RobNoddiError, ValueError):
    """A numeric argument lies outside the domain of the operation."""


class InvalidDirectionError(DomainError):
    """A direction vector is not unit norm."""


class EmptySchemeError(DomainError):
    pass


class SelectionSizeError(DomainError):
    pass


class InsufficientInputError(DomainError):
    pass


class UnsupportedOrderError(DomainError):
    """Odd or negative spherical-harmonic order."""


class RankDeficientError(RobNoddiError, ValueError):
    """Unregularized SH fit with fewer independent directions than coefficients."""


class InvalidSignalError(DomainError):
    pass


class InsufficientQuadratureError(DomainError):
    pass


class DimensionError(RobNoddiError, ValueError):
    """Array shapes are incompatible."""


class PolicyMismatchError(RobNoddiError, ValueError):
    pass


class WindowError(DimensionError):
    pass


class EmptyEvaluationError(RobNoddiError, ValueError):
    pass


class NormalizationRequiredError(RobNoddiError, ValueError):
    pass


class DataError(RobNoddiError):
    """Problems with on-disk data: files, tables, manifests."""


class MalformedTableError(DataError):
    pass


class UngroupedChannelError(DataError):
    pass


class MissingB0Error(DataError):
    pass


class CorruptFileError(DataError):
    pass


class VersionError(DataError):
    pass


class PatchTooLargeError(DimensionError):
    pass


class ManifestError(DataError):
    pass


class ConfigError(RobNoddiError):
    """Invalid or inconsistent experiment configuration."""
