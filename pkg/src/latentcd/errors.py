"""Exception types shared across the package."""


class LatentCDError(Exception):
    """Base class for all package errors."""


class DimensionError(LatentCDError):
    """Array shapes are inconsistent with what an operation requires."""


class NumericError(LatentCDError):
    """A computation produced NaN/Inf or otherwise left the valid range."""


class ValidationError(LatentCDError):
    """An input value violates a documented precondition."""


class ConfigError(LatentCDError):
    """A configuration file or flag set is invalid."""


class WeightsFormatError(LatentCDError):
    """Base for weight-container problems."""


class ChecksumError(WeightsFormatError):
    """Payload checksum does not match the stored CRC."""


class VersionError(WeightsFormatError):
    """Unsupported container version or bad magic."""


class ShapeMismatchError(WeightsFormatError):
    """A stored tensor shape disagrees with the config-implied shape."""


class StoreError(LatentCDError):
    """Latent store I/O or consistency failure."""


class DuplicateRecordError(StoreError):
    """A (key, timestamp) pair was inserted twice."""
