"""Exception hierarchy shared by all modules.

Each class also derives from the closest builtin so callers that only know
``ValueError``/``KeyError`` keep working.
"""


class IscError(Exception):
    """Base class for every error raised by this package."""


class FormatError(IscError, ValueError):
    """Malformed file header, magic, or record."""


class LengthError(IscError, ValueError):
    """Payload shorter or longer than its header declares."""


class SizeError(IscError, ValueError):
    """Image too small for the requested operation."""


class ArgumentError(IscError, ValueError):
    """Invalid argument value or combination."""


class DimensionMismatchError(ArgumentError):
    pass


class DegenerateInputError(IscError, ValueError):
    """Input has (near) zero norm and cannot be normalized."""


class DuplicateKeyError(IscError, ValueError):
    pass


class ValidationError(IscError, ValueError):
    pass


class MissingIdError(IscError, KeyError):
    """An id referenced by a candidate or prediction cannot be resolved."""
