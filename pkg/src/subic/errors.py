"""Exception types shared across the package."""


class SubicError(Exception):
    """Base class for all package errors."""


class ShapeError(SubicError, ValueError):
    """Array or code dimensions do not agree."""


class FormatError(SubicError):
    """A file on disk does not match its binary layout."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class DivergenceError(SubicError, ArithmeticError):
    """A loss or gradient became non-finite."""
