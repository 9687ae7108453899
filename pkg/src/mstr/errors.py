"""Error taxonomy shared across the package."""


class ConfigurationError(ValueError):
    """Invalid or inconsistent configuration (CLI exit code 1)."""


class GenerationError(RuntimeError):
    """A synthetic scene could not be realized under its constraints."""


class NumericError(RuntimeError):
    """A numeric failure such as a non-finite loss (CLI exit code 2)."""
