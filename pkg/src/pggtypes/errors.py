"""Exception hierarchy shared across the package."""


class PggTypesError(Exception):
    """Base class for all package errors."""


class DomainError(PggTypesError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class IngestionError(PggTypesError, ValueError):
    """Input data could not be turned into a valid panel."""


class ConstraintError(PggTypesError, ValueError):
    """No candidate satisfies a hard selection constraint."""


class DegenerateAffinityError(DomainError):
    """All points coincide, so no multi-cluster partition exists."""


class UnsupportedConfigurationError(PggTypesError, ValueError):
    """The operation is only defined for a narrower configuration."""


class FittingError(PggTypesError, RuntimeError):
    """Model estimation failed for every initialization."""


class NumericError(PggTypesError, ArithmeticError):
    """An iterative numerical routine failed to converge."""
