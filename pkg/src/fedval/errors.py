"""Exception types shared across the package."""


class FedValError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FedValError):
    """Invalid experiment or solver configuration (CLI exit code 2)."""


class DataFormatError(FedValError):
    """Malformed input data. Carries the offending 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None):
        super().__init__(message)
        self.line_number = line_number


class NumericError(FedValError):
    """Numeric failure such as a diverging objective (CLI exit code 3)."""


class MissingEntryError(FedValError):
    """A required model, matrix entry, or factor row is not available."""
