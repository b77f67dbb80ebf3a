""" Custom errors of the PART package. """


class ConfigurationError(ValueError):
    """Custom exception for an invalid sampler, model, training or run configuration."""


class DegenerateBoxError(ValueError):
    """Custom exception for a patch box with zero width or height."""


class GeometryError(ValueError):
    """Custom exception for boxes outside the image or invalid pair indices."""


class ShapeError(ValueError):
    """Custom exception for tensors whose shapes do not fit the requested operation."""


class NumericError(ArithmeticError):
    """Custom exception for non-finite activations or losses."""


class InvalidCheckpointError(Exception):
    """Custom exception for an unreadable or incompatible checkpoint file."""


class InvalidDatasetError(Exception):
    """Custom exception for a malformed raw dataset file."""


class MetricError(ValueError):
    """Custom exception for a metric that does not apply to the given dataset."""


class ZeroVarianceWarning(UserWarning):
    """Warning that a window with zero variance was normalized to zeros."""


class DegenerateCorrelationWarning(UserWarning):
    """Warning that a correlation is undefined because one side has zero variance."""
