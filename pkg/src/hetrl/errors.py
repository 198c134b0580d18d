"""Exception hierarchy shared across the package."""


class HetRLError(Exception):
    """Base class for all package errors."""


class ConfigError(HetRLError, ValueError):
    """Invalid configuration or parameter values."""


class DataError(HetRLError, ValueError):
    """Base class for problems with input data."""


class SchemaError(DataError):
    """Missing or malformed columns / fields."""


class IntegrityError(DataError):
    """Rows that cannot be assembled into trajectories (gaps, duplicates)."""


class DomainError(DataError):
    """Values outside their admissible range, e.g. an unknown action."""


class NumericalError(HetRLError, ArithmeticError):
    """A numerical routine failed (NaN, divergence)."""


class IllPosedError(NumericalError):
    """A linear system is singular or too badly conditioned to solve."""
