"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: usage problems exit 1,
anything raised from this hierarchy exits 2, unexpected exceptions
exit 3.
"""


class LtckitError(Exception):
    """Base class for all data/validation errors raised by ltckit."""


class FormatError(LtckitError):
    """A byte stream violates the LTRJ/LTCM on-disk format."""


class DataError(LtckitError):
    """Inputs violate a documented precondition or invariant."""
