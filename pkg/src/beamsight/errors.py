"""Shared exception hierarchy; the CLI maps these onto exit codes."""


class BeamsightError(Exception):
    """Base class for all beamsight errors."""


class DataError(BeamsightError):
    """Malformed, missing, or inconsistent input data (CLI exit 2)."""


class NumericError(BeamsightError):
    """Numeric failure such as a non-finite value or diverged loss (CLI exit 3)."""


class InvalidConfig(BeamsightError):
    """A configuration object violates its invariants (CLI exit 1)."""
