"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code the CLI uses when it escapes.
"""


class XVMUError(Exception):
    exit_code = 1


class ConfigurationError(XVMUError, ValueError):
    """Inconsistent shapes, resolutions or configuration values."""

    exit_code = 2


class ShapeError(ConfigurationError):
    """Operand extents do not line up."""


class ContractError(XVMUError, ValueError):
    """A caller broke an operation's precondition (e.g. non-scalar loss)."""

    exit_code = 2


class DataError(XVMUError, ValueError):
    """Unreadable or malformed samples, masks outside {0, 1}."""

    exit_code = 3


class NumericalAbort(XVMUError, ArithmeticError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 4
