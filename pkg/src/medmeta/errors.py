"""Exception hierarchy.

Every error raised by the library derives from :class:`MedMetaError`.
Input problems derive from :class:`ValidationError` (also a ``ValueError``);
numerical non-convergence derives from :class:`ConvergenceError`.
"""

from __future__ import annotations

from typing import Any


class MedMetaError(Exception):
    """Base class for all library errors."""


class ValidationError(MedMetaError, ValueError):
    """Input data or arguments violate a documented precondition."""


class CovariateSchemaError(ValidationError):
    pass


class DuplicateStudyError(ValidationError):
    pass


class DegenerateArmError(ValidationError):
    pass


class InvalidVarianceError(ValidationError):
    pass


class InsufficientStudiesError(ValidationError):
    pass


class UnidentifiedComponentError(ValidationError):
    pass


class MissingPathDataError(ValidationError):
    pass


class MissingMediatorError(ValidationError):
    pass


class MissingOutcomeError(ValidationError):
    pass


class MixedTargetError(ValidationError):
    pass


class MixedEstimandError(ValidationError):
    pass


class InadmissiblePathError(ValidationError):
    pass


class NonlinearModelError(ValidationError):
    pass


class SingularDesignError(ValidationError):
    """Design matrix is numerically rank deficient."""


class SingularPathSystemError(ValidationError):
    """|a| = 1 makes the (b, c') system singular."""


class InvalidWeightError(ValidationError):
    """WLS weight matrix is singular or not positive definite."""


class DegenerateVarianceError(ValidationError):
    pass


class ConvergenceError(MedMetaError):
    """An iterative fit did not converge.

    ``last_iterate`` holds whatever the optimizer had when it gave up.
    """

    def __init__(self, message: str, last_iterate: Any = None):
        super().__init__(message)
        self.last_iterate = last_iterate


class BootstrapInstabilityError(ConvergenceError):
    def __init__(self, message: str, n_failed: int, n_total: int):
        super().__init__(message, last_iterate=None)
        self.n_failed = n_failed
        self.n_total = n_total
