"""Exception and warning types shared across the package."""


class ShiftShareError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(ShiftShareError):
    """Input file does not match the documented schema (missing/unknown column)."""


class ValidationError(ShiftShareError):
    """Input data violates a documented invariant (negative share, NaN shift, ...)."""


class EstimationError(ShiftShareError):
    """An estimator cannot run on this input (rank deficiency, weak first stage, ...)."""


class NumericalError(ShiftShareError):
    """A numerical procedure failed to converge or produced a degenerate result."""


class ShiftShareWarning(UserWarning):
    """Non-fatal data or estimation conditions worth surfacing (zero rows, dominance, ...)."""
