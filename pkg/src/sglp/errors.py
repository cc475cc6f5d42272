"""Exception taxonomy shared across the toolkit.

``DataError`` covers everything a caller could have caused with bad inputs or
bad files; the CLI maps it to exit code 2. Anything else that escapes is an
internal error (exit code 3).
"""


class SglpError(Exception):
    """Base class for all errors raised intentionally by this package."""


class DataError(SglpError, ValueError):
    """Invalid in-memory data or malformed/inconsistent persisted artifacts."""


class FormatError(DataError):
    """A byte or text stream does not conform to one of the wire formats."""


class StageError(SglpError, RuntimeError):
    """A pipeline stage failed; the message names the stage."""
