"""Exception hierarchy shared by every cloudseg module."""


class CloudSegError(Exception):
    pass


class DimensionError(CloudSegError, ValueError):
    pass


class ConfigurationError(CloudSegError, ValueError):
    pass


class ValidationError(CloudSegError, ValueError):
    pass


class NumericError(CloudSegError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    pass


class DegenerateDayError(CloudSegError, ValueError):
    pass


class AssemblyError(CloudSegError, ValueError):
    pass


class TransferError(CloudSegError, ValueError):
    pass


class FormatError(CloudSegError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TruncationError(FormatError):
    pass


class PrerequisiteError(CloudSegError):
    """A pipeline step needs an artifact an earlier step has not produced."""
