"""Per-study linear working models and product-of-coefficients estimates."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .core import IPDStudy
from .errors import (
    DegenerateVarianceError,
    MissingMediatorError,
    MissingOutcomeError,
    NonlinearModelError,
    SingularDesignError,
)

RANK_TOL = 1e-10


def fit_ols(design: np.ndarray, response: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Least squares via SVD.

    Returns ``(coefficients, covariance, residual_variance)`` where the
    residual variance uses the ``n - p`` denominator and
    ``covariance = residual_variance * inv(X'X)``.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, p = X.shape
    if n <= p:
        raise SingularDesignError(f"need n > p, got n={n}, p={p}")
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    if s[-1] < RANK_TOL * s[0]:
        raise SingularDesignError(
            f"design is rank deficient (condition {s[0] / max(s[-1], 1e-300):.3g})"
        )
    coef = vt.T @ ((u.T @ y) / s)
    resid = y - X @ coef
    sigma2 = float(resid @ resid) / (n - p)
    vs = vt.T / s
    cov = sigma2 * (vs @ vs.T)
    return coef, cov, sigma2


@dataclass(frozen=True, eq=False)
class MediatorModel:
    """E(M | X, L) = a0 + a1 X + a2'L [+ axl'(X L)]."""

    coefs: np.ndarray
    cov: np.ndarray
    sigma2: float
    adjust: tuple[str, ...]
    xl_interaction: bool = False
    study_id: str = ""

    @property
    def alpha0(self) -> float:
        return float(self.coefs[0])

    @property
    def alpha1(self) -> float:
        return float(self.coefs[1])

    @property
    def se_alpha1(self) -> float:
        return math.sqrt(self.cov[1, 1])

    @property
    def alpha2(self) -> np.ndarray:
        return self.coefs[2:2 + len(self.adjust)]

    @property
    def alpha_xl(self) -> np.ndarray | None:
        return self.coefs[2 + len(self.adjust):] if self.xl_interaction else None

    def mean(self, x: float | np.ndarray, l: np.ndarray) -> np.ndarray:
        """Predicted mediator mean at exposure ``x`` for covariate rows ``l``."""
        l = np.asarray(l, dtype=float).reshape(-1, len(self.adjust))
        out = self.alpha0 + self.alpha1 * x + l @ self.alpha2
        if self.xl_interaction:
            out = out + x * (l @ self.alpha_xl)
        return out


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """E(Y | X, M, L) = b0 + b1 X + b2 M + b3'L [+ bxm X M]."""

    coefs: np.ndarray
    cov: np.ndarray
    sigma2: float
    adjust: tuple[str, ...]
    interaction: bool = False
    study_id: str = ""

    @property
    def beta0(self) -> float:
        return float(self.coefs[0])

    @property
    def beta1(self) -> float:
        return float(self.coefs[1])

    @property
    def beta2(self) -> float:
        return float(self.coefs[2])

    @property
    def se_beta2(self) -> float:
        return math.sqrt(self.cov[2, 2])

    @property
    def beta3(self) -> np.ndarray:
        return self.coefs[3:3 + len(self.adjust)]

    @property
    def beta_xm(self) -> float | None:
        return float(self.coefs[-1]) if self.interaction else None

    def mean(self, x: float, m: np.ndarray, l: np.ndarray) -> np.ndarray:
        l = np.asarray(l, dtype=float).reshape(-1, len(self.adjust))
        slope_m = self.beta2 + (self.beta_xm * x if self.interaction else 0.0)
        return self.beta0 + self.beta1 * x + slope_m * m + l @ self.beta3


@dataclass(frozen=True, eq=False)
class WorkingModels:
    """Mediator and outcome working models fitted in one study."""

    mediator: MediatorModel
    outcome: OutcomeModel

    @property
    def mediator_coefs(self) -> np.ndarray:
        return self.mediator.coefs

    @property
    def outcome_coefs(self) -> np.ndarray:
        return self.outcome.coefs

    @property
    def alpha1(self) -> float:
        return self.mediator.alpha1

    @property
    def beta2(self) -> float:
        return self.outcome.beta2

    @property
    def beta_xm(self) -> float | None:
        return self.outcome.beta_xm

    @property
    def adjust(self) -> tuple[str, ...]:
        return self.outcome.adjust


def _check_mediator(study: IPDStudy) -> None:
    if not np.all(np.isfinite(study.m)):
        raise MissingMediatorError(f"study {study.study_id}: mediator column missing or incomplete")


def mediator_design(x: np.ndarray, l: np.ndarray, xl_interaction: bool) -> np.ndarray:
    cols = [np.ones_like(x), x, l]
    if xl_interaction:
        cols.append(x[:, None] * l)
    return np.column_stack(cols)


def outcome_design(x: np.ndarray, m: np.ndarray, l: np.ndarray, interaction: bool) -> np.ndarray:
    cols = [np.ones_like(x), x, m, l]
    if interaction:
        cols.append(x * m)
    return np.column_stack(cols)


def fit_mediator_model(
    study: IPDStudy, adjust: Sequence[str] = (), xl_interaction: bool = False
) -> MediatorModel:
    _check_mediator(study)
    adjust = tuple(adjust)
    l = study.covariates(adjust)
    try:
        coef, cov, s2 = fit_ols(mediator_design(study.x, l, xl_interaction), study.m)
    except SingularDesignError as exc:
        raise SingularDesignError(f"study {study.study_id}, mediator model: {exc}") from None
    return MediatorModel(coef, cov, s2, adjust, xl_interaction, study.study_id)


def fit_outcome_model(
    study: IPDStudy, adjust: Sequence[str] = (), interaction: bool = False
) -> OutcomeModel:
    if not study.has_outcome:
        raise MissingOutcomeError(f"study {study.study_id} has no outcome data")
    _check_mediator(study)
    adjust = tuple(adjust)
    l = study.covariates(adjust)
    try:
        coef, cov, s2 = fit_ols(outcome_design(study.x, study.m, l, interaction), study.y)
    except SingularDesignError as exc:
        raise SingularDesignError(f"study {study.study_id}, outcome model: {exc}") from None
    return OutcomeModel(coef, cov, s2, adjust, interaction, study.study_id)


def fit_working_models(
    study: IPDStudy,
    adjust: Sequence[str] = (),
    interaction: bool = False,
    xl_interaction: bool = False,
) -> WorkingModels:
    """Fit M ~ 1 + X + L and Y ~ 1 + X + M + L (+ X:M) in one study.

    ``xl_interaction`` adds X:L terms to the mediator model; it is off by
    default and only needed when the covariates modify the X-M effect.
    """
    if not study.has_outcome:
        raise MissingOutcomeError(f"study {study.study_id} has no outcome data")
    return WorkingModels(
        mediator=fit_mediator_model(study, adjust, xl_interaction),
        outcome=fit_outcome_model(study, adjust, interaction),
    )


def sobel(a: float, se_a: float, b: float, se_b: float) -> tuple[float, float]:
    """Product a*b and its first-order (two-term) Sobel standard error."""
    return a * b, math.sqrt(a * a * se_b * se_b + b * b * se_a * se_a)


def product_of_coefficients(models: WorkingModels) -> tuple[float, float]:
    if models.outcome.interaction or models.mediator.xl_interaction:
        raise NonlinearModelError(
            "product of coefficients is not the natural indirect effect "
            "when interaction terms are present"
        )
    return sobel(models.alpha1, models.mediator.se_alpha1, models.beta2, models.outcome.se_beta2)


def standardized_indirect(study: IPDStudy, models: WorkingModels) -> float:
    """a*b*sd(X)/sd(Y) using the study's sample standard deviations."""
    estimate, _ = product_of_coefficients(models)
    sd_y = float(np.std(study.y, ddof=1))
    if sd_y == 0:
        raise DegenerateVarianceError(f"study {study.study_id}: outcome has zero variance")
    return estimate * float(np.std(study.x, ddof=1)) / sd_y
