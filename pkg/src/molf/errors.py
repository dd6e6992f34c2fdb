"""Exception types shared across the package."""


class MolfError(Exception):
    """Base class for all molf errors."""


class ContractError(MolfError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes are incompatible; the message carries both shapes."""


class NumericError(MolfError):
    """A computation produced or received non-finite values."""


class CheckpointError(MolfError):
    """A checkpoint could not be written, or read back exactly."""


class ConfigError(MolfError):
    """A run configuration is malformed or inconsistent."""
