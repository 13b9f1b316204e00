"""Shared exception types used across the package."""


class DimensionError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid configuration value, key, or mode."""


class ParseError(ValueError):
    """Malformed file content. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss; aborts with a diagnostic dump."""
