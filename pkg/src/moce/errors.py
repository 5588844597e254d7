"""Error taxonomy shared by every module.

Each class maps to one failure category so callers (and the CLI exit-code
logic) can tell misuse apart from bad data and from numeric breakdown.
"""


class MoceError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MoceError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class ContractError(MoceError, ValueError):
    """A documented precondition was violated by the caller."""


class StateError(MoceError, RuntimeError):
    """An object was used in an order its lifecycle forbids."""


class NumericError(MoceError, ArithmeticError):
    """A computation produced or encountered non-finite values."""


class FormatError(MoceError, ValueError):
    """A file or stream does not match its declared format."""


class ConfigError(MoceError, ValueError):
    """A configuration value is missing, unknown, or inconsistent."""
