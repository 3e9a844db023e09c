"""Shared exception base so the CLI can report one machine-parsable line."""


class KwbiasError(Exception):
    """Base class for all errors raised by this package."""
