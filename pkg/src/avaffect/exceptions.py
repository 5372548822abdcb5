"""Error types shared across the package.

Every failure mode maps onto one of these so the CLI can translate them
into stable exit codes (2 for usage/config/data problems, 3 for numeric
failures).
"""


class AffectError(Exception):
    """Base class for all package errors."""


class DimensionError(AffectError):
    """Tensor shapes are incompatible with the requested operation."""


class InputError(AffectError):
    """An input value violates an operation's precondition."""


class NumericError(AffectError):
    """A computation produced (or received) non-finite values."""


class ConfigError(AffectError):
    """A configuration file or flag set is invalid."""


class FormatError(AffectError):
    """A binary container is malformed or truncated."""


class ValidationError(AffectError):
    """A manifest record violates the schema."""


class ResolutionError(AffectError):
    """A manifest record references a file that cannot be found."""


class UnsupportedFormatError(AffectError):
    """A media file uses an encoding this package does not read."""
