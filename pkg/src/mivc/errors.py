"""Exception hierarchy shared by all modules.

Exit-code mapping used by the CLI lives in ``mivc.cli``; library code only
raises these types.
"""


class MivcError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MivcError):
    """Array dimensions do not satisfy an operation's contract."""


class UsageError(MivcError):
    """An operation was invoked with an incompatible kind or argument."""


class DataError(MivcError):
    """A payload or file violates a data contract."""


class BadMagicError(DataError):
    """File does not start with the expected magic bytes."""


class CountMismatchError(DataError):
    """Declared and actual element counts disagree."""


class NonFiniteError(DataError):
    """A payload contains NaN or infinite values."""


class ManifestError(DataError):
    """A dataset manifest is malformed or violates its invariants."""


class ParseError(DataError):
    """Text input (CSV) could not be parsed."""
