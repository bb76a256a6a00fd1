"""Exception types shared across the package."""


class TrisalError(Exception):
    """Base class for all package errors."""


class ShapeError(TrisalError):
    """Operands have incompatible shapes; the message names both."""


class ConfigError(TrisalError):
    """Invalid configuration value or combination."""


class ContractError(TrisalError):
    """An API precondition was violated by the caller."""


class DataError(TrisalError):
    """Dataset file is missing, malformed, or inconsistent."""


class NumericalError(TrisalError):
    """A computation produced non-finite values."""


class VerificationError(TrisalError):
    """A self-check (gradient check, invariant) failed."""
