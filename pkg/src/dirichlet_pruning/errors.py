"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class DomainError(ValueError):
    """Scalar argument outside the function's domain."""


class NumericError(ArithmeticError):
    """A numeric routine failed to converge or underflowed."""


class ContractError(ValueError):
    """A call violated an operation's precondition (empty batch, zero epochs, ...)."""


class FormatError(ValueError):
    """A serialized file is malformed; the message carries the byte offset."""


class PipelineError(RuntimeError):
    """A pipeline phase failed; the message names the phase and cause."""


class ConfigError(ValueError):
    """An experiment config is missing keys or contains unknown ones."""
