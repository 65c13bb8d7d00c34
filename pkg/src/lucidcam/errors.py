"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ArgumentError -> 2, DataError -> 3,
NumericError -> 4.
"""


class LucidCamError(Exception):
    pass


class ShapeError(LucidCamError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ArgumentError(LucidCamError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class DataError(LucidCamError):
    """Missing, corrupt or empty input data."""


class NumericError(LucidCamError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(DataError):
    """A checkpoint file is malformed."""


class VersionError(FormatError):
    """A checkpoint declares an unsupported format version."""
