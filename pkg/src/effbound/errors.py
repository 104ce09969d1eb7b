"""Exception hierarchy shared across the package.

Errors are split by where they surface: schema errors come from malformed
input documents, structural errors from inconsistent population objects,
validation errors from overlap/identification checks that a well-formed
population can still fail, assumption errors from rank or invertibility
requirements of the theory, and numeric assertion errors from internal
cross-checks that should never fire on correct code.
"""

from __future__ import annotations


class EffboundError(Exception):
    """Base class for all package errors."""


class SchemaError(EffboundError):
    """A JSON document or config violates the input schema.

    Carries the path of the offending key so callers can point at it.
    """

    def __init__(self, key_path: str, message: str):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class StructuralError(EffboundError):
    """A population object is internally inconsistent (hard failure)."""


class ValidationError(EffboundError):
    """A well-formed population fails overlap or identification checks."""


class AssumptionError(EffboundError):
    """A rank / invertibility / identification assumption is violated."""


class SingularInformationError(AssumptionError):
    """Score information matrix is numerically singular.

    The null direction is kept so diagnostics can name the redundant
    parameter combination.
    """

    def __init__(self, min_eigenvalue: float, null_direction):
        self.min_eigenvalue = min_eigenvalue
        self.null_direction = null_direction
        super().__init__(
            "score information matrix is singular, so the parameter is not "
            f"locally identified: min eigenvalue {min_eigenvalue:.3e}, "
            f"null direction {list(map(float, null_direction))}"
        )


class NumericAssertionError(EffboundError):
    """An internal exact identity failed beyond tolerance; indicates a bug."""


class EstimationError(EffboundError):
    """A sample-based routine cannot produce an estimate (e.g. empty cell)."""
