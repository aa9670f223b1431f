class ShapeError(ValueError):
    """Incompatible tensor extents."""


class ConfigError(ValueError):
    """Invalid model, feature, rank or suite configuration."""


class NumericalError(RuntimeError):
    """Non-finite loss or gradient, or a failed decomposition."""
