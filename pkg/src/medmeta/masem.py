"""Meta-analytic structural equation modeling for the single-mediator model.

Two routes: pool the reported indirect effects directly (parameter-based),
or pool correlation vectors and fit the path model to the pooled vector by
weighted least squares (correlation-based).
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .core import AggregateMediationRecord, CorrelationRecord, MetaResult, PathModel
from .errors import (
    InsufficientStudiesError,
    InvalidWeightError,
    SingularPathSystemError,
    ValidationError,
)
from .meta_engines import MultivariateMetaResult, multivariate_re_meta, random_effect_meta
from .within_study import sobel

PARAMETER_BASED = "parameter-based MASEM"


def parameter_based_masem(
    records: Sequence[AggregateMediationRecord], method: str = "dl"
) -> MetaResult:
    records = list(records)
    if len(records) < 2:
        raise InsufficientStudiesError(f"parameter-based MASEM needs k >= 2, got {len(records)}")
    return random_effect_meta(
        [r.theta_hat for r in records],
        [r.se_theta ** 2 for r in records],
        method=method,
        study_ids=[r.study_id for r in records],
        label=PARAMETER_BASED,
    )


def path_product_gap(records: Sequence[AggregateMediationRecord], method: str = "dl") -> dict | None:
    """Compare the product of separately pooled a and b with the pooled a*b.

    Returns ``None`` unless at least two records carry path estimates.
    """
    paths = [r for r in records if r.has_paths]
    if len(paths) < 2:
        return None
    a = random_effect_meta([r.a_hat for r in paths], [r.se_a ** 2 for r in paths], method)
    b = random_effect_meta([r.b_hat for r in paths], [r.se_b ** 2 for r in paths], method)
    ab = random_effect_meta([r.theta_hat for r in paths], [r.se_theta ** 2 for r in paths], method)
    return {
        "k_with_paths": len(paths),
        "pooled_a": a.estimate,
        "pooled_b": b.estimate,
        "product_of_pooled": a.estimate * b.estimate,
        "pooled_product": ab.estimate,
        "difference": a.estimate * b.estimate - ab.estimate,
    }


def implied_correlations(path: PathModel) -> np.ndarray:
    """(rho_xy, rho_xm, rho_my) implied by standardized paths (a, b, c')."""
    return np.array(path.implied())


@dataclass(frozen=True)
class StructuralFit:
    path: PathModel
    discrepancy: float
    lrt_stat: float
    lrt_df: int
    se_path: tuple[float, float, float]
    indirect: float
    se_indirect: float
    method: str = "closed_form"
    pooled: MultivariateMetaResult | None = None

    def to_dict(self) -> dict:
        return {
            "path": self.path.to_dict(),
            "discrepancy": self.discrepancy,
            "lrt_stat": self.lrt_stat,
            "lrt_df": self.lrt_df,
            "se_path": dict(zip(("a", "b", "c_prime"), self.se_path)),
            "indirect": self.indirect,
            "se_indirect": self.se_indirect,
            "method": self.method,
        }


def solve_paths(rho: np.ndarray) -> tuple[float, float, float]:
    """Exact inverse of :func:`implied_correlations`."""
    r_xy, r_xm, r_my = (float(v) for v in rho)
    a = r_xm
    det = 1.0 - a * a
    if abs(det) < 1e-12:
        raise SingularPathSystemError("|a| = 1: b and c' are not identified")
    b = (r_my - a * r_xy) / det
    c = (r_xy - a * r_my) / det
    return a, b, c


def path_jacobian(rho: np.ndarray) -> np.ndarray:
    """d(a, b, c') / d(r_xy, r_xm, r_my) of the inverse mapping."""
    r_xy, r_xm, r_my = (float(v) for v in rho)
    a, b, c = solve_paths(rho)
    det = 1.0 - a * a
    return np.array([
        [0.0, 1.0, 0.0],
        [-a / det, (2 * a * b - r_xy) / det, 1.0 / det],
        [1.0 / det, (2 * a * c - r_my) / det, -a / det],
    ])


def discrepancy(rho_hat: np.ndarray, v_inv: np.ndarray, params: Sequence[float]) -> float:
    a, b, c = params
    resid = np.asarray(rho_hat) - np.array([c + a * b, a, b + a * c])
    return float(resid @ v_inv @ resid)


def _weight_inverse(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    evals = np.linalg.eigvalsh(0.5 * (v + v.T))
    if evals.min() <= 1e-14 * max(evals.max(), 1e-300):
        raise InvalidWeightError("covariance of pooled correlations is singular")
    return np.linalg.inv(v)


def wls_minimize(
    rho_hat: np.ndarray, v: np.ndarray, start: Sequence[float] = (0.0, 0.0, 0.0)
) -> tuple[np.ndarray, float]:
    """Derivative-free minimization of the WLS discrepancy (Nelder-Mead)."""
    v_inv = _weight_inverse(v)
    res = optimize.minimize(
        lambda p: discrepancy(rho_hat, v_inv, p), np.asarray(start, dtype=float),
        method="Nelder-Mead",
        options={"xatol": 1e-12, "fatol": 1e-12, "maxfev": 5000},
    )
    return res.x, float(res.fun)


def wls_fit(pooled: MultivariateMetaResult, method: str = "closed_form") -> StructuralFit:
    """Fit (a, b, c') to the pooled correlations.

    The single-mediator model is just-identified, so the closed-form
    solution makes the discrepancy zero and does not depend on V.
    ``method="nelder_mead"`` runs the iterative minimizer instead.
    """
    rho = np.asarray(pooled.rho_hat, dtype=float)
    v = np.asarray(pooled.v, dtype=float)
    v_inv = _weight_inverse(v)
    if method == "closed_form":
        params = solve_paths(rho)
    elif method == "nelder_mead":
        x0 = (float(rho[1]), 0.0, 0.0)
        params, _ = wls_minimize(rho, v, x0)
        params = tuple(float(p) for p in params)
    else:
        raise ValidationError(f"unknown WLS method {method!r}")
    path = PathModel(*params)
    f = discrepancy(rho, v_inv, params)
    J = path_jacobian(rho)
    cov = J @ v @ J.T
    se_path = tuple(math.sqrt(max(float(s), 0.0)) for s in np.diag(cov))
    indirect, se_ind = sobel(path.a, se_path[0], path.b, se_path[1])
    n_pooled = rho.size
    return StructuralFit(
        path=path,
        discrepancy=max(f, 0.0),
        # V already is the sampling covariance of rho_hat, so F is the LR chi-square
        lrt_stat=max(f, 0.0),
        lrt_df=n_pooled - 3,
        se_path=se_path,
        indirect=indirect,
        se_indirect=se_ind,
        method=method,
    )


def correlation_based_masem(
    records: Sequence[CorrelationRecord], method: str = "closed_form"
) -> StructuralFit:
    """Pool correlations, then fit the path model; ``fit.pooled`` keeps stage one."""
    pooled = multivariate_re_meta(records)
    return dataclasses.replace(wls_fit(pooled, method=method), pooled=pooled)
