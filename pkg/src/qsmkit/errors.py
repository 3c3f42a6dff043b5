"""Exception taxonomy shared by the whole toolkit.

The CLI maps these onto process exit codes (see cli.EXIT_CODES):
usage/config problems exit 2, I/O problems exit 3, shape/numeric
problems exit 4.
"""


class QsmError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QsmError):
    """Array extents or channel counts are incompatible."""


class ConfigError(QsmError):
    """A configuration value is out of its legal range or unknown."""


class UsageError(QsmError):
    """An API was called out of protocol (e.g. backward on a spent tape)."""


class NumericError(QsmError):
    """Non-finite values where finite ones are required."""


class GeometryError(QsmError):
    """A geometric source does not fit inside its grid."""
