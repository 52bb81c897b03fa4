"""Error taxonomy shared across the toolkit.

Three families, matching the CLI exit codes: usage errors (bad flags or
arguments, exit 1), data errors (malformed or inconsistent inputs, exit 2),
and internal errors (broken invariants that indicate a bug, exit 3).
"""


class AdabetError(Exception):
    """Base class for all toolkit errors."""


class UsageError(AdabetError):
    """The caller asked for something the interface does not offer."""


class DataError(AdabetError):
    """An input file or value fails validation."""


class InternalError(AdabetError):
    """An internal invariant was violated; this is a bug, not bad input."""
