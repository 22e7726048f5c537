"""Bivariate random-effects pooling of the two mediation paths.

Each study reports a_i ~ N(alpha_i, psi_i^2) and b_i ~ N(beta_i, phi_i^2);
the study-level (alpha_i, beta_i) are bivariate normal around
(mu_alpha, mu_beta). The pooled indirect effect is mu_alpha * mu_beta.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ._rng import stream
from .core import AggregateMediationRecord, is_psd
from .errors import (
    BootstrapInstabilityError,
    ConvergenceError,
    InsufficientStudiesError,
    MissingPathDataError,
    ValidationError,
)
from .meta_engines import fit_mvre, moment_start
from .within_study import sobel

DEFAULT_BOOTSTRAP = 2000
MAX_FAILED_SHARE = 0.05
SIGMA_NOTE = (
    "between-study covariance (sigma_11, sigma_12, sigma_22) estimated "
    "jointly with the means by likelihood"
)


@dataclass(frozen=True, eq=False)
class BivariateREFit:
    mu_alpha: float
    mu_beta: float
    sigma: np.ndarray
    var_mu_alpha: float
    var_mu_beta: float
    loglik: float
    converged: bool
    method: str = "reml"
    k_studies: int = 0
    cov_mu: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not is_psd(self.sigma):
            raise ValidationError("sigma must be PSD")
        if self.var_mu_alpha < 0 or self.var_mu_beta < 0:
            raise ValidationError("variances of the pooled means must be >= 0")

    def to_dict(self) -> dict:
        return {
            "mu_alpha": self.mu_alpha,
            "mu_beta": self.mu_beta,
            "sigma": {"s11": float(self.sigma[0, 0]), "s12": float(self.sigma[0, 1]),
                      "s22": float(self.sigma[1, 1])},
            "var_mu_alpha": self.var_mu_alpha,
            "var_mu_beta": self.var_mu_beta,
            "loglik": self.loglik,
            "converged": self.converged,
            "method": self.method,
            "k_studies": self.k_studies,
            "note": SIGMA_NOTE,
        }


def _path_arrays(records: Sequence[AggregateMediationRecord]) -> tuple[np.ndarray, np.ndarray]:
    records = list(records)
    lacking = [r.study_id for r in records if not r.has_paths]
    if lacking:
        raise MissingPathDataError(f"records without (a, se_a, b, se_b): {lacking}")
    if len(records) < 2:
        raise InsufficientStudiesError(f"bivariate random-effects model needs k >= 2, got {len(records)}")
    y = np.array([[r.a_hat, r.b_hat] for r in records])
    S = np.zeros((len(records), 2, 2))
    S[:, 0, 0] = [r.se_a ** 2 for r in records]
    S[:, 1, 1] = [r.se_b ** 2 for r in records]
    return y, S


def _starts(y: np.ndarray, S: np.ndarray) -> list[np.ndarray]:
    base = np.diag(np.diag(moment_start(y, S)))
    return [base, 0.1 * base, 10.0 * base]


def fit_bivariate_re(
    records: Sequence[AggregateMediationRecord], method: str = "reml"
) -> BivariateREFit:
    """(Restricted) maximum likelihood fit with three BFGS starts."""
    y, S = _path_arrays(records)
    fit = fit_mvre(y, S, method=method, starts=_starts(y, S), log_diag=True)
    if not fit.converged:
        raise ConvergenceError("bivariate random-effects fit did not converge", last_iterate=fit)
    T = 0.5 * (fit.T + fit.T.T)
    return BivariateREFit(
        mu_alpha=float(fit.mu[0]),
        mu_beta=float(fit.mu[1]),
        sigma=T,
        var_mu_alpha=float(fit.cov_mu[0, 0]),
        var_mu_beta=float(fit.cov_mu[1, 1]),
        loglik=fit.loglik,
        converged=True,
        method=method,
        k_studies=len(y),
        cov_mu=fit.cov_mu,
    )


def delta_estimate(fit: BivariateREFit) -> tuple[float, float]:
    """mu_alpha * mu_beta with the Sobel standard error."""
    if not fit.converged:
        raise ValidationError("fit did not converge")
    return sobel(fit.mu_alpha, math.sqrt(fit.var_mu_alpha), fit.mu_beta, math.sqrt(fit.var_mu_beta))


def _psd_project(T: np.ndarray) -> np.ndarray:
    w, Q = np.linalg.eigh(0.5 * (T + np.swapaxes(T, -1, -2)))
    return (Q * np.maximum(w, 0.0)[..., None, :]) @ np.swapaxes(Q, -1, -2)


_BASIS = np.array([[[1.0, 0.0], [0.0, 0.0]],
                   [[0.0, 1.0], [1.0, 0.0]],
                   [[0.0, 0.0], [0.0, 1.0]]])


def _inv2(V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse and log-determinant of stacked 2x2 SPD matrices."""
    a, b, d = V[..., 0, 0], V[..., 0, 1], V[..., 1, 1]
    det = a * d - b * b
    inv = np.empty_like(V)
    inv[..., 0, 0] = d / det
    inv[..., 1, 1] = a / det
    inv[..., 0, 1] = inv[..., 1, 0] = -b / det
    return inv, np.log(det)


def _batched_state(Y, S, T, reml):
    A, logdet = _inv2(T[:, None] + S[None])
    Hinv = A.sum(axis=1)
    H, logdet_hinv = _inv2(Hinv)
    mu = (H @ (A @ Y[..., None]).sum(axis=1))[..., 0]
    e = Y - mu[:, None]
    u = (A @ e[..., None])[..., 0]
    ll = -0.5 * (logdet.sum(axis=1) + np.einsum("bki,bki->b", e, u))
    if reml:
        ll -= 0.5 * logdet_hinv
    return A, H, Hinv, mu, u, ll


def _score_info(A, H, Hinv, u, reml):
    """Score and expected information with respect to (T11, T12, T22)."""
    G = 0.5 * (np.einsum("bki,bkj->bij", u, u) - Hinv)
    if reml:
        G += 0.5 * (A @ H[:, None] @ A).sum(axis=1)
    score = np.stack([G[:, 0, 0], 2 * G[:, 0, 1], G[:, 1, 1]], axis=1)
    F = A[:, :, None] @ _BASIS @ A[:, :, None]  # (B, k, r, 2, 2) = A E_r A
    C = F.sum(axis=1)
    t1 = np.einsum("brij,sij->brs", C, _BASIS)
    if not reml:
        return score, 0.5 * t1
    Z = _BASIS @ (A @ H[:, None])[:, :, None]  # E_r A H
    t2 = np.einsum("bksij,bkrji->brs", F, Z)
    HC = H[:, None] @ C
    t4 = np.einsum("brij,bsji->brs", HC, HC)
    return score, 0.5 * (t1 - t2 - np.swapaxes(t2, 1, 2) + t4)


def _chol_to_t(c: np.ndarray) -> np.ndarray:
    l1, l2, l3 = c[:, 0], c[:, 1], c[:, 2]
    T = np.empty((c.shape[0], 2, 2))
    T[:, 0, 0] = l1 * l1
    T[:, 0, 1] = T[:, 1, 0] = l1 * l2
    T[:, 1, 1] = l2 * l2 + l3 * l3
    return T


def _chol_jacobian(c: np.ndarray) -> np.ndarray:
    """d(T11, T12, T22) / d(l1, l2, l3) for T = L L'."""
    l1, l2, l3 = c[:, 0], c[:, 1], c[:, 2]
    J = np.zeros((c.shape[0], 3, 3))
    J[:, 0, 0] = 2 * l1
    J[:, 1, 0] = l2
    J[:, 1, 1] = l1
    J[:, 2, 1] = 2 * l2
    J[:, 2, 2] = 2 * l3
    return J


# second derivatives of (T11, T12, T22) with respect to (l1, l2, l3)
_CHOL_CURVATURE = np.array([
    [[2.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    [[0.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]],
])


def batched_fisher_scoring(
    Y: np.ndarray, S: np.ndarray, method: str = "reml", max_iter: int = 500,
    tol: float = 1e-8, ll_rtol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fit many bivariate RE datasets at once.

    Fisher scoring in the Cholesky factor of T with Levenberg-Marquardt
    damping, so boundary optima (singular T) are reached without
    projection. ``Y`` is (B, k, 2); ``S`` the shared (k, 2, 2) within-study
    covariances. Only unconverged datasets are iterated. A dataset counts
    as converged once an (almost) undamped step changes T by less than
    ``tol`` or the log-likelihood by less than ``ll_rtol`` relative.
    Returns ``(mu, T, converged)``.
    """
    reml = method == "reml"
    B = Y.shape[0]
    sv = S[:, [0, 1], [0, 1]].mean(axis=0)
    c = np.zeros((B, 3))
    start = np.sqrt(np.maximum(Y.var(axis=1, ddof=1) - sv, 1e-4))
    c[:, 0], c[:, 2] = start[:, 0], start[:, 1]
    T = _chol_to_t(c)
    A, H, Hinv, mu, u, ll = _batched_state(Y, S, T, reml)
    lam = np.full(B, 1e-3)
    done = np.zeros(B, dtype=bool)
    eye = np.eye(3)
    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        score_t, info_t = _score_info(A[act], H[act], Hinv[act], u[act], reml)
        J = _chol_jacobian(c[act])
        Jt = np.swapaxes(J, 1, 2)
        score = (Jt @ score_t[..., None])[..., 0]
        # expected information plus the curvature of T = LL' itself
        curv = np.einsum("br,rij->bij", score_t, _CHOL_CURVATURE)
        info = Jt @ info_t @ J - curv
        scale = np.maximum(np.abs(np.diagonal(info, axis1=1, axis2=2)).max(axis=1), 1e-12)
        shift = np.maximum(lam[act] * scale, -np.linalg.eigvalsh(info)[:, 0] + 1e-8 * scale)
        damped = info + shift[:, None, None] * eye
        step = np.linalg.solve(damped, score[..., None])[..., 0]
        c_new = c[act] + step
        T_new = _chol_to_t(c_new)
        state = _batched_state(Y[act], S, T_new, reml)
        ll_old = ll[act]
        better = state[-1] >= ll_old - 1e-12 * np.abs(ll_old)
        dpar = np.abs(T_new - T[act]).max(axis=(1, 2))
        dll = np.abs(state[-1] - ll_old) / np.maximum(np.abs(ll_old), 1e-300)
        small_damping = lam[act] <= 1e-2
        idx = act[better]
        c[idx] = c_new[better]
        T[idx] = T_new[better]
        for full, part in zip((A, H, Hinv, mu, u, ll), state):
            full[idx] = part[better]
        lam[idx] = np.maximum(lam[idx] / 10, 1e-12)
        lam[act[~better]] *= 10
        done[act] = better & small_damping & ((dpar < tol) | (dll < ll_rtol))
        done[act[lam[act] > 1e12]] = False
    return mu, T, done


def _sqrt_psd(T: np.ndarray) -> np.ndarray:
    w, Q = np.linalg.eigh(T)
    return (Q * np.sqrt(np.maximum(w, 0.0))) @ Q.T


def bootstrap_draws(
    fit: BivariateREFit, se_a: np.ndarray, se_b: np.ndarray, b: int, seed: int
) -> np.ndarray:
    """Simulated (a*, b*) of shape (b, k, 2); replicate r uses stream (seed, r)."""
    k = se_a.size
    root = _sqrt_psd(fit.sigma)
    mu = np.array([fit.mu_alpha, fit.mu_beta])
    se = np.column_stack([se_a, se_b])
    out = np.empty((b, k, 2))
    for r in range(b):
        z = stream(seed, "ml-bootstrap", r).standard_normal((2, k, 2))
        out[r] = mu + z[0] @ root + se * z[1]
    return out


@dataclass(frozen=True)
class BootstrapResult:
    low: float
    high: float
    b: int
    seed: int
    n_failed: int
    contains_estimate: bool

    def to_dict(self) -> dict:
        return {"low": self.low, "high": self.high, "b": self.b, "seed": self.seed,
                "n_failed": self.n_failed, "contains_estimate": self.contains_estimate}


def bootstrap_ci(
    fit: BivariateREFit,
    records: Sequence[AggregateMediationRecord],
    b: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
    level: float = 0.95,
) -> BootstrapResult:
    """Parametric percentile bootstrap interval for mu_alpha * mu_beta.

    True study effects are redrawn from the fitted bivariate normal, then
    sampling errors from the reported standard errors, and the model is
    refitted. Replicates the batched solver cannot fit are retried with
    the quasi-Newton fit before being counted as failures.
    """
    if b < 100:
        raise ValidationError(f"need at least 100 bootstrap replicates, got {b}")
    y, S = _path_arrays(records)
    draws = bootstrap_draws(fit, np.sqrt(S[:, 0, 0]), np.sqrt(S[:, 1, 1]), b, seed)
    mu, _, ok = batched_fisher_scoring(draws, S, method=fit.method)
    failed = 0
    for r in np.flatnonzero(~ok):
        try:
            refit = fit_mvre(draws[r], S, method=fit.method, starts=_starts(draws[r], S), log_diag=True)
        except ConvergenceError:
            refit = None
        if refit is None or not refit.converged:
            failed += 1
            mu[r] = np.nan
        else:
            mu[r] = refit.mu
    if failed > MAX_FAILED_SHARE * b:
        raise BootstrapInstabilityError(
            f"{failed} of {b} bootstrap replicates failed to converge", failed, b)
    deltas = mu[:, 0] * mu[:, 1]
    deltas = deltas[np.isfinite(deltas)]
    tail = 100 * (1 - level) / 2
    low, high = np.percentile(deltas, [tail, 100 - tail])
    est = fit.mu_alpha * fit.mu_beta
    return BootstrapResult(float(low), float(high), b, seed, failed, bool(low <= est <= high))
