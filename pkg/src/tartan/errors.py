"""Exception types shared across the package.

Every raised error carries a short machine-readable ``code`` (e.g.
``"uf_same_corpus"``) so callers and the CLI can branch on it without
parsing messages.
"""

from __future__ import annotations


class TartanError(Exception):
    """Base class for all package errors."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)


class DataError(TartanError):
    """Invalid data, schema violations, bad files. CLI exit code 2."""


class NumericError(TartanError):
    """Numeric failures (overflow, non-finite values). CLI exit code 3."""
