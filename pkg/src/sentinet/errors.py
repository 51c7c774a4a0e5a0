"""Exception hierarchy shared across the package."""


class SentinetError(Exception):
    pass


class DimensionError(SentinetError, ValueError):
    """A tensor shape does not agree with what an operation needs."""


class SpecError(SentinetError, ValueError):
    """A layer spec is internally inconsistent (e.g. non-divisible groups)."""


class NumericError(SentinetError, ArithmeticError):
    """A non-finite value showed up where finite values are required."""


class SurgeryError(SentinetError, ValueError):
    pass


class TransferError(SentinetError, ValueError):
    pass


class ConversionError(SentinetError, ValueError):
    pass


class FitError(SentinetError, ValueError):
    pass


class DataError(SentinetError, ValueError):
    """Malformed manifest rows, image files or fold requests."""


class WeightFileError(DataError):
    pass
