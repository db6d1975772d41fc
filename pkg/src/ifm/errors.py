"""Exception taxonomy shared across the package."""


class IfmError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(IfmError):
    """Operand shapes are incompatible."""


class ContractError(IfmError):
    """A documented precondition was violated by the caller."""


class ParameterError(IfmError):
    """A configuration or distribution parameter is out of range."""


class DataError(IfmError):
    """Training data is missing a required annotation."""


class FormatError(IfmError):
    """A serialized file has bad magic, version, or structure."""


class VocabularyError(IfmError):
    """A word is outside the closed grammar."""


class CacheError(IfmError):
    """A key/value cache does not match the model or request."""


class CapacityError(IfmError):
    """A sequence or batch exceeds the configured maximum size."""


class NumericError(IfmError):
    """A NaN or Inf appeared where finite values are required."""


class CompatibilityError(IfmError):
    """A checkpoint was produced under a different configuration."""


class GenerationError(IfmError):
    """The scripted expert could not produce a valid episode."""


class OrchestrationError(IfmError):
    """An experiment referenced an artifact that does not exist."""
