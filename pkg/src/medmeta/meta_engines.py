"""Fixed- and random-effects meta-analysis engines.

Univariate pooling (inverse-variance, DerSimonian-Laird, REML) and a
multivariate random-effects model for vectors with missing components,
used to pool correlation vectors.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .core import CORRELATION_ORDER, CorrelationRecord, MetaResult, is_psd
from .errors import (
    ConvergenceError,
    InsufficientStudiesError,
    InvalidVarianceError,
    UnidentifiedComponentError,
    ValidationError,
)

Z975 = float(stats.norm.ppf(0.975))
REML_MAX_ITER = 200
REML_LL_RTOL = 1e-10
REML_PARAM_TOL = 1e-8


def _as_inputs(estimates, variances) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(estimates, dtype=float).ravel()
    v = np.asarray(variances, dtype=float).ravel()
    if y.shape != v.shape:
        raise ValidationError("estimates and variances differ in length")
    if y.size == 0:
        raise InsufficientStudiesError("at least one study is required")
    if not np.all(np.isfinite(y)):
        raise ValidationError("estimates must be finite")
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise InvalidVarianceError("within-study variances must be finite and > 0")
    return y, v


def _pool(y, v, tau2, method, study_ids, label, q=None) -> MetaResult:
    w = 1.0 / (v + tau2)
    sw = w.sum()
    est = float(w @ y / sw)
    se = math.sqrt(1.0 / sw)
    weights = w / sw
    ids = tuple(str(s) for s in study_ids) if study_ids is not None else tuple(
        str(i + 1) for i in range(y.size))
    if len(ids) != y.size:
        raise ValidationError("one study id per estimate required")
    return MetaResult(
        estimate=est,
        se=se,
        tau2=float(tau2),
        ci_low=est - Z975 * se,
        ci_high=est + Z975 * se,
        weights=tuple(float(x) for x in weights),
        k_studies=int(y.size),
        method=method,
        study_ids=ids,
        study_estimates=tuple(float(x) for x in y),
        study_variances=tuple(float(x) for x in v),
        q_statistic=q,
        label=label,
    )


def cochran_q(estimates, variances) -> float:
    y, v = _as_inputs(estimates, variances)
    w = 1.0 / v
    mu = w @ y / w.sum()
    return float(w @ (y - mu) ** 2)


def fixed_effect_meta(
    estimates: Sequence[float],
    variances: Sequence[float],
    study_ids: Sequence[str] | None = None,
    label: str = "",
) -> MetaResult:
    """Inverse-variance weighted mean with a 95% Wald interval."""
    y, v = _as_inputs(estimates, variances)
    q = cochran_q(y, v) if y.size > 1 else 0.0
    return _pool(y, v, 0.0, "fixed", study_ids, label, q)


def dl_tau2(estimates, variances) -> float:
    """DerSimonian-Laird moment estimator, truncated at zero."""
    y, v = _as_inputs(estimates, variances)
    w = 1.0 / v
    q = cochran_q(y, v)
    c = w.sum() - (w ** 2).sum() / w.sum()
    if c <= 0:
        return 0.0
    return max(0.0, (q - (y.size - 1)) / c)


def reml_loglik(y: np.ndarray, v: np.ndarray, tau2: float) -> float:
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = w @ y / sw
    return -0.5 * float(
        np.log(v + tau2).sum() + math.log(sw) + w @ (y - mu) ** 2
        + (y.size - 1) * math.log(2 * math.pi)
    )


def _reml_score(y: np.ndarray, v: np.ndarray, tau2: float) -> tuple[float, float]:
    """Derivative of the restricted log-likelihood in tau2 and its expected information."""
    w = 1.0 / (v + tau2)
    sw = w.sum()
    mu = w @ y / sw
    w2 = w * w
    tr_p = sw - w2.sum() / sw
    tr_pp = w2.sum() - 2 * (w2 * w).sum() / sw + (w2.sum() / sw) ** 2
    return 0.5 * float(w2 @ (y - mu) ** 2 - tr_p), 0.5 * float(tr_pp)


def _polish_root(y: np.ndarray, v: np.ndarray, tau2: float) -> float:
    """Refine an interior tau2 to the root of the score by bracketing.

    Fisher scoring converges linearly, so its stopping point can sit a
    few 1e-7 (relative to the sampling variances) short of the optimum.
    """
    if tau2 <= 0.0:
        return tau2

    def score(t):
        return _reml_score(y, v, t)[0]

    s0 = score(tau2)
    if s0 == 0.0:
        return tau2
    step = max(1e-6 * tau2, 1e-12 * float(v.mean()))
    while step <= tau2:
        other = tau2 + step if s0 > 0 else tau2 - step
        if score(other) * s0 < 0:
            lo, hi = sorted((tau2, other))
            return float(optimize.brentq(score, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps))
        step *= 10
    return tau2


def reml_tau2(estimates, variances, max_iter: int = REML_MAX_ITER) -> float:
    """REML between-study variance by Fisher scoring, projected onto tau2 >= 0."""
    y, v = _as_inputs(estimates, variances)
    tau2 = dl_tau2(y, v)
    ll = reml_loglik(y, v, tau2)
    for _ in range(max_iter):
        score, info = _reml_score(y, v, tau2)
        new = max(0.0, tau2 + score / info)
        new_ll = reml_loglik(y, v, new)
        # step halving keeps the iteration monotone
        halvings = 0
        while new_ll < ll - 1e-12 * abs(ll) and halvings < 30:
            new = 0.5 * (new + tau2)
            new_ll = reml_loglik(y, v, new)
            halvings += 1
        dpar = abs(new - tau2)
        dll = abs(new_ll - ll) / max(abs(ll), 1e-300)
        tau2, ll = new, new_ll
        if dpar < REML_PARAM_TOL or dll < REML_LL_RTOL:
            polished = _polish_root(y, v, tau2)
            return polished if reml_loglik(y, v, polished) >= ll else tau2
    raise ConvergenceError(f"REML did not converge in {max_iter} iterations", last_iterate=tau2)


def random_effect_meta(
    estimates: Sequence[float],
    variances: Sequence[float],
    method: str = "dl",
    study_ids: Sequence[str] | None = None,
    label: str = "",
) -> MetaResult:
    """Random-effects pooling with weights 1/(v_i + tau2)."""
    y, v = _as_inputs(estimates, variances)
    if y.size < 2:
        raise InsufficientStudiesError(f"random-effects meta-analysis needs k >= 2, got {y.size}")
    if method == "dl":
        tau2 = dl_tau2(y, v)
    elif method == "reml":
        tau2 = reml_tau2(y, v)
    else:
        raise ValidationError(f"unknown random-effects method {method!r}")
    return _pool(y, v, tau2, method, study_ids, label, cochran_q(y, v))


# ---------------------------------------------------------------------------
# multivariate random effects with missing components
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MVREFit:
    """Fit of y_i ~ N(mu, T + S_i) over observed components."""

    mu: np.ndarray
    T: np.ndarray
    cov_mu: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    chol: np.ndarray


def _tril(p: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(p)


def _chol_from_params(theta: np.ndarray, p: int, log_diag: bool) -> np.ndarray:
    L = np.zeros((p, p))
    L[_tril(p)] = theta
    if log_diag:
        d = np.arange(p)
        L[d, d] = np.exp(L[d, d])
    return L


def _params_from_chol(L: np.ndarray, log_diag: bool) -> np.ndarray:
    L = L.copy()
    if log_diag:
        d = np.arange(L.shape[0])
        L[d, d] = np.log(np.maximum(L[d, d], 1e-300))
    return L[_tril(L.shape[0])]


class MVRELikelihood:
    """Profile (restricted) log-likelihood of the multivariate RE model.

    ``y`` is (k, p) with NaN marking missing components; ``S`` is (k, p, p).
    Missing rows/columns are padded with the identity so each study's
    covariance stays invertible; masking then removes their contribution.
    """

    def __init__(self, y: np.ndarray, S: np.ndarray, method: str = "reml"):
        if method not in ("ml", "reml"):
            raise ValidationError(f"unknown likelihood {method!r}")
        self.obs = np.isfinite(y)
        self.y = np.where(self.obs, y, 0.0)
        self.S = np.asarray(S, dtype=float)
        self.k, self.p = y.shape
        self.method = method
        self.mask2 = self.obs[:, :, None] & self.obs[:, None, :]
        self.pad = np.zeros_like(self.S)
        idx = np.arange(self.p)
        self.pad[:, idx, idx] = (~self.obs).astype(float)
        self.n_obs = int(self.obs.sum())

    def evaluate(self, T: np.ndarray):
        V = np.where(self.mask2, T[None] + self.S, 0.0) + self.pad
        sign, logdet = np.linalg.slogdet(V)
        if np.any(sign <= 0):
            return -np.inf, None
        A = np.where(self.mask2, np.linalg.inv(V), 0.0)
        Hinv = A.sum(axis=0)
        try:
            H = np.linalg.inv(Hinv)
        except np.linalg.LinAlgError:
            return -np.inf, None
        mu = H @ np.einsum("kij,kj->i", A, self.y)
        e = np.where(self.obs, self.y - mu, 0.0)
        u = np.einsum("kij,kj->ki", A, e)
        quad = float(np.einsum("ki,ki->", e, u))
        ll = -0.5 * (logdet.sum() + quad)
        G = 0.5 * (np.einsum("ki,kj->ij", u, u) - Hinv)
        if self.method == "reml":
            s, ld = np.linalg.slogdet(Hinv)
            ll -= 0.5 * (ld + (self.n_obs - self.p) * math.log(2 * math.pi))
            G += 0.5 * np.einsum("kij,jl,klm->im", A, H, A)
        else:
            ll -= 0.5 * self.n_obs * math.log(2 * math.pi)
        return ll, (mu, H, 0.5 * (G + G.T))

    def objective(self, theta: np.ndarray, log_diag: bool):
        """Negative log-likelihood and its gradient in Cholesky parameters."""
        L = _chol_from_params(theta, self.p, log_diag)
        ll, extra = self.evaluate(L @ L.T)
        if not np.isfinite(ll):
            return 1e300, np.zeros_like(theta)
        G = extra[2]
        dL = 2.0 * G @ L
        if log_diag:
            d = np.arange(self.p)
            dL[d, d] *= L[d, d]
        return -ll, -dL[_tril(self.p)]


def fit_mvre(
    y: np.ndarray,
    S: np.ndarray,
    method: str = "reml",
    starts: Sequence[np.ndarray] | None = None,
    log_diag: bool = False,
    max_iter: int = 1000,
) -> MVREFit:
    """Maximize the (restricted) likelihood over the Cholesky factor of T.

    Quasi-Newton (BFGS) with analytic gradient, optionally from several
    starting matrices; the best converged start wins.
    """
    y = np.asarray(y, dtype=float)
    lik = MVRELikelihood(y, S, method)
    p = lik.p
    if starts is None:
        starts = [moment_start(y, S)]
    best = None
    for T0 in starts:
        L0 = np.linalg.cholesky(T0 + 1e-12 * np.eye(p))
        res = optimize.minimize(
            lik.objective, _params_from_chol(L0, log_diag), args=(log_diag,),
            jac=True, method="BFGS", options={"gtol": 1e-8, "maxiter": max_iter},
        )
        gnorm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.inf
        # precision loss at a flat optimum is a successful stop
        ok = bool(res.success) or (res.status == 2 and gnorm < 1e-4)
        if best is None or (ok, -res.fun) > (best[0], -best[1].fun):
            best = (ok, res)
    ok, res = best
    L = _chol_from_params(res.x, p, log_diag)
    T = L @ L.T
    ll, extra = lik.evaluate(T)
    if not np.isfinite(ll):
        raise ConvergenceError("likelihood is not finite at the optimum", last_iterate=T)
    mu, H, _ = extra
    return MVREFit(mu=mu, T=T, cov_mu=H, loglik=float(ll), converged=ok,
                   n_iter=int(res.nit), chol=L)


def moment_start(y: np.ndarray, S: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """Diagonal starting T from observed dispersion minus mean sampling variance."""
    p = y.shape[1]
    diag = np.empty(p)
    for j in range(p):
        col = y[:, j][np.isfinite(y[:, j])]
        sv = S[np.isfinite(y[:, j]), j, j]
        excess = col.var(ddof=1) - sv.mean() if col.size > 1 else 0.0
        diag[j] = max(excess, floor)
    return np.diag(diag)


@dataclass(frozen=True, eq=False)
class MultivariateMetaResult:
    """Pooled correlation vector (r_xy, r_xm, r_my) with its covariance."""

    rho_hat: np.ndarray
    v: np.ndarray
    t_hat: np.ndarray
    k_studies: int
    pattern_counts: dict[str, int]
    loglik: float = float("nan")
    converged: bool = True

    def __post_init__(self) -> None:
        for name in ("v", "t_hat"):
            if not is_psd(getattr(self, name)):
                raise ValidationError(f"{name} is not symmetric PSD")
        if np.any(np.abs(self.rho_hat) > 1):
            raise ValidationError(f"pooled correlations outside [-1, 1]: {self.rho_hat}")

    def to_dict(self) -> dict:
        return {
            "rho_hat": dict(zip(CORRELATION_ORDER, map(float, self.rho_hat))),
            "v": self.v.tolist(),
            "t_hat": self.t_hat.tolist(),
            "k_studies": self.k_studies,
            "pattern_counts": dict(self.pattern_counts),
            "loglik": self.loglik,
            "converged": self.converged,
        }


def olkin_siotani(r: np.ndarray, n: int) -> np.ndarray:
    """Large-sample covariance of (r_xy, r_xm, r_my) for sample size ``n``."""
    r_xy, r_xm, r_my = r

    def shared(rjk, rjh, rkh):
        return rkh * (1 - rjk ** 2 - rjh ** 2) - 0.5 * rjk * rjh * (1 - rjk ** 2 - rjh ** 2 - rkh ** 2)

    S = np.diag((1 - np.asarray(r) ** 2) ** 2)
    S[0, 1] = S[1, 0] = shared(r_xy, r_xm, r_my)  # share X
    S[0, 2] = S[2, 0] = shared(r_xy, r_my, r_xm)  # share Y
    S[1, 2] = S[2, 1] = shared(r_xm, r_my, r_xy)  # share M
    return S / (n - 1)


def sampling_covariances(records: Sequence[CorrelationRecord]) -> np.ndarray:
    """Per-study Sigma_i; missing ones come from the n-weighted average correlations."""
    R = np.array([rec.vector for rec in records])
    n = np.array([rec.n for rec in records], dtype=float)
    obs = np.isfinite(R)
    avg = np.array([
        np.average(R[obs[:, j], j], weights=n[obs[:, j]]) if obs[:, j].any() else 0.0
        for j in range(3)
    ])
    out = np.empty((len(records), 3, 3))
    for i, rec in enumerate(records):
        if rec.sigma is not None:
            out[i] = np.asarray(rec.sigma)
            continue
        if rec.n < 2:
            raise ValidationError(f"study {rec.study_id}: n must be >= 2 to derive Sigma_i")
        mask = obs[i][:, None] & obs[i][None, :]
        out[i] = np.where(mask, olkin_siotani(avg, rec.n), 0.0)
    return out


def multivariate_re_meta(records: Sequence[CorrelationRecord]) -> MultivariateMetaResult:
    """REML pooling of correlation vectors; absent correlations contribute nothing."""
    records = list(records)
    if len(records) < 2:
        raise InsufficientStudiesError("multivariate pooling needs at least 2 records")
    R = np.array([rec.vector for rec in records])
    obs = np.isfinite(R)
    counts = {name: int(obs[:, j].sum()) for j, name in enumerate(CORRELATION_ORDER)}
    missing = [name for name, c in counts.items() if c == 0]
    if missing:
        raise UnidentifiedComponentError(f"correlations never observed: {missing}")
    S = sampling_covariances(records)
    fit = fit_mvre(R, S, method="reml")
    if not fit.converged:
        raise ConvergenceError("multivariate REML did not converge", last_iterate=fit)
    return MultivariateMetaResult(
        rho_hat=fit.mu,
        v=0.5 * (fit.cov_mu + fit.cov_mu.T),
        t_hat=fit.T,
        k_studies=len(records),
        pattern_counts=counts,
        loglik=fit.loglik,
        converged=fit.converged,
    )
