"""Exception types shared across the package."""


class EwpfError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(EwpfError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(EwpfError, ValueError):
    """A hyperparameter or configuration value is invalid."""


class ContractError(EwpfError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DataError(EwpfError, ValueError):
    """Input data is malformed, empty, or too short for the request."""


class DivergenceError(EwpfError, RuntimeError):
    """Training produced a non-finite loss."""
