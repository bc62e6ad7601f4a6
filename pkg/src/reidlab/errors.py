"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """A precondition on arguments or state was violated."""


class UnsupportedOpError(KeyError):
    """Backward pass hit an op kind with no registered gradient rule."""


class OracleError(RuntimeError):
    """A test oracle could not be evaluated (e.g. non-finite probe values)."""


class ConfigError(ValueError):
    """Malformed configuration file or unknown configuration key."""
