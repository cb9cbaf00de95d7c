"""Exception types shared across the package."""


class SurvfuseError(Exception):
    """Base class for all survfuse errors."""


class ShapeError(SurvfuseError):
    """Tensor or matrix dimensions incompatible with the requested operation."""


class NumericError(SurvfuseError):
    """Non-finite values where finite ones are required."""


class ConfigError(SurvfuseError):
    """Invalid configuration value or unknown configuration key."""


class ParseError(SurvfuseError):
    """Malformed clinical CSV input; message carries the offending row."""


class FormatError(SurvfuseError):
    """Malformed volume binary file (magic, version, dims, payload)."""


class InsufficientDataError(SurvfuseError):
    """Too few samples to perform the requested fit or construction."""


class DegenerateInputError(SurvfuseError):
    """Input with no usable variation (e.g. constant volume channel)."""


class DegenerateDesignError(SurvfuseError):
    """Singular design: the information matrix cannot be inverted."""


class ConvergenceError(SurvfuseError):
    """Iterative fit failed to converge within its iteration cap."""


class UndefinedMetricError(SurvfuseError):
    """Metric undefined for this cohort (e.g. no comparable pairs)."""


class GenerationError(SurvfuseError):
    """Synthetic cohort generation produced a degenerate cohort."""
