"""Exception hierarchy shared across the toolkit."""


class MinbitsError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(MinbitsError):
    """A parameter or config value is outside its valid domain."""


class IngestionError(MinbitsError):
    """A dataset could not be downloaded or read from cache."""


class ShapeError(MinbitsError):
    """Tensor shapes are inconsistent with an operation's contract."""


class NumericError(MinbitsError):
    """A computation produced non-finite values."""


class TrainingError(MinbitsError):
    """A training run diverged or produced invalid gradients."""


class ValidationError(MinbitsError):
    """A request or argument failed validation."""
