"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: validation/configuration/dimension
problems exit 1, usage problems exit 2.
"""


class DropforgeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DropforgeError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(DropforgeError):
    """A configuration value or combination of values is invalid."""


class UsageError(DropforgeError):
    """An API or CLI surface was called in an unsupported way."""


class ValidationError(DropforgeError):
    """Input data violates a documented contract (bad mask, missing file...)."""


class NumericError(DropforgeError):
    """Non-finite values reached an operation that assumes finite input."""


class TrainingError(DropforgeError):
    """The optimizer or training loop hit an unrecoverable numeric state."""
