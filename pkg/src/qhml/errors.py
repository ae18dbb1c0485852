"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration: qubit counts, grid entries, split sizes."""


class ShapeError(ValueError):
    """Array lengths or shapes do not match what an operation expects."""


class DataError(ValueError):
    """Malformed or non-finite input data."""


class DegenerateDataError(DataError):
    """Data that carries no usable variation, e.g. constant labels."""


class UndefinedMetricError(ValueError):
    """A metric cannot be computed, e.g. AUC with a single class present."""


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite gradient."""


class BatchSizeError(ShapeError):
    """Train-mode batch normalization on fewer than two samples."""
