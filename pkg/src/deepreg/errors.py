"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class DegenerateGeometry(ValueError):
    """Raised when a shape cannot be normalized (coincident eye centers)."""


class DataError(RuntimeError):
    """Unusable input data: missing files, malformed annotations, P mismatch."""


class UnsupportedFormat(DataError):
    pass


class CorruptModel(DataError):
    pass


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss or shape."""
