"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2, FormatError -> 3.
"""


class ValidationError(ValueError):
    """A configuration or argument violates a documented invariant."""


class FormatError(RuntimeError):
    """A file does not conform to its declared on-disk format."""
