"""Exception hierarchy shared by every module."""


class SpgpError(Exception):
    """Base class for all package errors."""


class FormatError(SpgpError, ValueError):
    """File does not carry the expected magic bytes or layout."""


class VersionError(FormatError):
    pass


class TruncationError(FormatError):
    """Payload length disagrees with declared dimensions."""


class ChecksumError(FormatError):
    pass


class DataError(SpgpError, ValueError):
    """Values violate a domain invariant (non-finite, duplicate ids, ...)."""


class ShapeMismatchError(SpgpError, ValueError):
    pass


class DegenerateMaskError(SpgpError, ArithmeticError):
    pass


class ConditioningError(SpgpError, ArithmeticError):
    """Cholesky factorization failed even at the largest jitter."""


class TrainingError(SpgpError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
