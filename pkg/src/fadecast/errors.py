"""Exception hierarchy shared across the package."""


class FadecastError(Exception):
    """Base class for all package errors."""


class ValidationError(FadecastError, ValueError):
    """Raised when inputs violate a documented precondition."""


class NumericalError(FadecastError, ArithmeticError):
    """Raised on numerical failure: divergence, stiffness, non-finite values."""


class ArchiveError(ValidationError):
    """Base class for model-archive problems."""


class ArchiveVersionError(ArchiveError):
    """Archive declares an unsupported format version."""


class ArchiveShapeError(ArchiveError):
    """Archive parameter shapes do not match the declared architecture."""


class ArchiveCorruptError(ArchiveError):
    """Archive payload cannot be decoded."""
