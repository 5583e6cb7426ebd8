"""Exception hierarchy with pinned process exit codes.

Every error raised by this package derives from PpcnError and carries the
exit code the command line tool must terminate with:

    2  configuration, usage and parse errors (bad flags, bad structure
       strings, shape mismatches, calling backward before forward)
    3  storage errors (missing files, unreadable manifests) and format
       errors (bad magic, version, checksum)
    4  numerical aborts (non-finite loss or gradient during training)
"""


class PpcnError(Exception):
    exit_code = 1


class ConfigError(PpcnError, ValueError):
    """Invalid configuration value or command usage."""

    exit_code = 2


class ShapeError(PpcnError, ValueError):
    """Tensor shape or dimensionality does not match the contract."""

    exit_code = 2


class InputError(PpcnError, ValueError):
    """Input data values violate the contract (non-finite, out of range)."""

    exit_code = 2


class StateError(PpcnError, RuntimeError):
    """Operation called in an invalid order, e.g. backward before forward."""

    exit_code = 2


class StorageError(PpcnError, OSError):
    """File or directory missing or unreadable; message names the path."""

    exit_code = 3


class FormatError(PpcnError, ValueError):
    """Serialized data is malformed: magic, version, size or checksum."""

    exit_code = 3


class NumericsError(PpcnError, ArithmeticError):
    """Non-finite value where the training contract requires finiteness."""

    exit_code = 4
