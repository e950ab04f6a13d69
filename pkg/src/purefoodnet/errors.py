"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(EngineError):
    """A kernel or pooling window cannot be placed on its input."""


class ShapeError(EngineError):
    """Tensor or parameter shapes are inconsistent."""


class NonFiniteError(EngineError):
    """A value that must be finite is NaN or infinite."""


class DegenerateBatchError(EngineError):
    """Batch statistics requested over fewer than two elements per channel."""


class UnknownLayerError(EngineError):
    """A layer name does not exist in the model."""


class WeightDigestError(EngineError):
    """A weight file does not belong to the model spec it is loaded onto."""


class DataFormatError(EngineError):
    """A file or encoded value does not follow its declared format."""


class DataError(EngineError):
    """Dataset content is missing, unreadable, or malformed."""


class ConfigError(EngineError):
    """A configuration value is invalid or incomplete."""
