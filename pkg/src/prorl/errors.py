"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a documented precondition (shape, range, schema)."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class DatasetError(ValueError):
    """Malformed dataset file. Carries the offending row/column when known."""

    def __init__(self, message, row=None, column=None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.row = row
        self.column = column


class SchemaError(DatasetError):
    """Dataset columns do not match the environment's schema."""


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or state."""


class FidelityError(RuntimeError):
    """Surrogate failed its held-out accuracy gate."""
