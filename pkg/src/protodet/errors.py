"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid generation or training parameters."""


class DataError(Exception):
    """Missing, malformed, or corrupt dataset files."""


class NumericalError(Exception):
    """Training produced a non-finite loss."""
