"""Synthetic mediation trials and Monte Carlo ground truth.

Every generator is a pure function of its configuration and seed; random
numbers come from :func:`medmeta._rng.stream` so replicates can be produced
in any order.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ._rng import stream
from .core import AggregateMediationRecord, CorrelationRecord, IPDStudy, PathModel
from .errors import ValidationError
from .within_study import fit_working_models, product_of_coefficients


@dataclass(frozen=True)
class Dist:
    """Covariate distribution: ``normal(loc, scale)`` or ``uniform(low, high)``."""

    kind: str
    p1: float
    p2: float

    def __post_init__(self) -> None:
        if self.kind == "normal":
            if not self.p2 > 0:
                raise ValidationError("normal scale must be > 0")
        elif self.kind == "uniform":
            if not self.p2 > self.p1:
                raise ValidationError("uniform needs high > low")
        else:
            raise ValidationError(f"unknown distribution {self.kind!r}")

    @classmethod
    def normal(cls, loc: float, scale: float) -> Dist:
        return cls("normal", float(loc), float(scale))

    @classmethod
    def uniform(cls, low: float, high: float) -> Dist:
        return cls("uniform", float(low), float(high))

    @property
    def mean(self) -> float:
        return self.p1 if self.kind == "normal" else 0.5 * (self.p1 + self.p2)

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "normal":
            return rng.normal(self.p1, self.p2, n)
        return rng.uniform(self.p1, self.p2, n)

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "normal":
            return {"kind": "normal", "loc": self.p1, "scale": self.p2}
        return {"kind": "uniform", "low": self.p1, "high": self.p2}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Dist:
        if d["kind"] == "normal":
            return cls.normal(d["loc"], d["scale"])
        if d["kind"] == "uniform":
            return cls.uniform(d["low"], d["high"])
        raise ValidationError(f"unknown distribution {d['kind']!r}")


def _vec(values, d: int, name: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in values) if values else (0.0,) * d
    if len(values) != d:
        raise ValidationError(f"{name} has length {len(values)}, expected {d}")
    return values


@dataclass(frozen=True)
class DGPConfig:
    """Structural equations of one simulated trial.

    M = a0 + a1 X + a2'L + X (axl'L) + sigma_m e_M
    Y = b0 + b1 X + b2 M + bxm X M + b3'L + u_to_y U + sigma_y e_Y

    M and Y are then multiplied by ``scale_m`` and ``scale_y``. The latent
    U ~ N(u_mean, 1) is zero-effect by default; nonzero ``u_to_l`` /
    ``u_to_y`` with study-specific ``u_mean`` breaks between-trial
    ignorability given L.
    """

    alpha0: float = 0.0
    alpha1: float = 0.5
    alpha2: tuple[float, ...] = ()
    beta0: float = 0.0
    beta1: float = 0.2
    beta2: float = 0.4
    beta3: tuple[float, ...] = ()
    beta_xm: float = 0.0
    l_dist: tuple[Dist, ...] = ()
    sigma_m: float = 1.0
    sigma_y: float = 1.0
    n: int = 500
    scale_m: float = 1.0
    scale_y: float = 1.0
    seed: int = 0
    covariate_names: tuple[str, ...] = ()
    alpha_xl: tuple[float, ...] = ()
    u_mean: float = 0.0
    u_to_l: tuple[float, ...] = ()
    u_to_y: float = 0.0

    def __post_init__(self) -> None:
        d = len(self.l_dist)
        object.__setattr__(self, "l_dist", tuple(
            dist if isinstance(dist, Dist) else Dist.from_dict(dist) for dist in self.l_dist))
        for name in ("alpha2", "beta3", "alpha_xl", "u_to_l"):
            object.__setattr__(self, name, _vec(getattr(self, name), d, name))
        names = tuple(self.covariate_names) or tuple(f"l{i + 1}" for i in range(d))
        if len(names) != d:
            raise ValidationError("covariate_names length must match l_dist")
        object.__setattr__(self, "covariate_names", names)
        for name in ("sigma_m", "sigma_y", "scale_m", "scale_y"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if int(self.n) != self.n or self.n < 4:
            raise ValidationError("n must be an integer >= 4")

    @property
    def d(self) -> int:
        return len(self.l_dist)

    def replace(self, **changes: Any) -> DGPConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["l_dist"] = [dist.to_dict() for dist in self.l_dist]
        for name in ("alpha2", "beta3", "alpha_xl", "u_to_l", "covariate_names"):
            out[name] = list(out[name])
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> DGPConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown DGP config keys: {sorted(unknown)}")
        kw = dict(d)
        for name in ("alpha2", "beta3", "alpha_xl", "u_to_l", "covariate_names"):
            if name in kw:
                kw[name] = tuple(kw[name])
        if "l_dist" in kw:
            kw["l_dist"] = tuple(Dist.from_dict(x) for x in kw["l_dist"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> DGPConfig:
        return cls.from_dict(json.loads(text))


def _draw_covariates(dists: Sequence[Dist], rng: np.random.Generator, n: int) -> np.ndarray:
    if not dists:
        return np.zeros((n, 0))
    return np.column_stack([dist.draw(rng, n) for dist in dists])


def generate_study(cfg: DGPConfig, study_id: str = "S1", treatment_version: str = "") -> IPDStudy:
    rng = stream(cfg.seed, "study")
    n = cfg.n
    l = _draw_covariates(cfg.l_dist, rng, n)
    u = rng.normal(cfg.u_mean, 1.0, n)
    l = l + np.outer(u, cfg.u_to_l)
    x = rng.binomial(1, 0.5, n).astype(float)
    e_m = rng.standard_normal(n)
    e_y = rng.standard_normal(n)
    a2, axl, b3 = (np.asarray(v) for v in (cfg.alpha2, cfg.alpha_xl, cfg.beta3))
    m = cfg.alpha0 + cfg.alpha1 * x + l @ a2 + x * (l @ axl) + cfg.sigma_m * e_m
    y = (cfg.beta0 + cfg.beta1 * x + cfg.beta2 * m + cfg.beta_xm * x * m + l @ b3
         + cfg.u_to_y * u + cfg.sigma_y * e_y)
    return IPDStudy(
        study_id=study_id,
        x=x,
        m=m * cfg.scale_m,
        y=y * cfg.scale_y,
        l=l,
        covariate_names=cfg.covariate_names,
        treatment_version=treatment_version,
    )


def true_nie_closed_form(cfg: DGPConfig, mean_l: Sequence[float], x: int, x_star: int) -> float:
    """NIE implied by the structural equations when the target has mean covariates ``mean_l``."""
    slope_m = cfg.beta2 + cfg.beta_xm * x
    mediator_shift = (cfg.alpha1 + float(np.dot(cfg.alpha_xl, mean_l))) * (x_star - x)
    return slope_m * mediator_shift * cfg.scale_y


def true_nie_oracle(
    cfg: DGPConfig,
    target: Sequence[Dist] | IPDStudy | None,
    x: int,
    x_star: int,
    mc_n: int = 1_000_000,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte Carlo NIE of the mechanisms in ``cfg`` over a target population.

    Draw L from the target, M(x*) from the mediator mechanism, then
    Y(x, M(x*)) and Y(x, M(x)) with independent outcome noise. The unit's
    mediator noise is shared by both worlds. ``target`` may be a list of
    covariate distributions, an :class:`IPDStudy` (rows resampled with
    replacement) or ``None`` for the config's own covariate law.
    Returns ``(estimate, monte_carlo_se)`` in outcome units.
    """
    if mc_n < 100_000:
        raise ValidationError("mc_n must be >= 1e5")
    rng = stream(seed, "oracle")
    if isinstance(target, IPDStudy):
        rows = rng.integers(0, target.n, mc_n)
        l = target.covariates(cfg.covariate_names)[rows]
    else:
        dists = cfg.l_dist if target is None else tuple(target)
        if len(dists) != cfg.d:
            raise ValidationError("target covariate dimension differs from config")
        l = _draw_covariates(dists, rng, mc_n)
        l = l + np.outer(rng.normal(cfg.u_mean, 1.0, mc_n), cfg.u_to_l)
    a2, axl, b3 = (np.asarray(v) for v in (cfg.alpha2, cfg.alpha_xl, cfg.beta3))
    base_m = cfg.alpha0 + l @ a2 + cfg.sigma_m * rng.standard_normal(mc_n)

    def m_at(xx: int) -> np.ndarray:
        return base_m + xx * (cfg.alpha1 + l @ axl)

    def y_at(xx: int, m: np.ndarray) -> np.ndarray:
        # additive U terms cancel in the contrast and are left out
        return (cfg.beta0 + cfg.beta1 * xx + (cfg.beta2 + cfg.beta_xm * xx) * m + l @ b3
                + cfg.sigma_y * rng.standard_normal(mc_n))

    diff = y_at(x, m_at(x_star)) - y_at(x, m_at(x))
    est = float(diff.mean()) * cfg.scale_y
    se = float(diff.std(ddof=1)) / math.sqrt(mc_n) * cfg.scale_y
    return est, se


def appendix1_scenario(
    seed: int,
    n: int = 5000,
    alpha: float = 0.1,
    beta: float = 0.5,
) -> tuple[IPDStudy, IPDStudy]:
    """Two trials with identical mechanisms but different exposure spread.

    The exposure is a continuous blood-pressure-like measure driven by age.
    The narrow study admits ages 60-80, the wide one 40-80, so the wide
    study has the larger exposure SD while (alpha, beta) are shared.
    """
    out = []
    for label, (lo, hi) in (("narrow", (60.0, 80.0)), ("wide", (40.0, 80.0))):
        rng = stream(seed, "appendix1", label)
        age = rng.uniform(lo, hi, n)
        x = 100.0 + 0.8 * age + 5.0 * rng.standard_normal(n)
        m = 1.0 + alpha * x + rng.standard_normal(n)
        y = 2.0 + beta * m + rng.standard_normal(n)
        out.append(IPDStudy(
            study_id=label, x=x, m=m, y=y, l=np.zeros((n, 0)), covariate_names=(),
            exposure="continuous",
        ))
    return out[0], out[1]


@dataclass(frozen=True, eq=False)
class AggregateSet:
    aggregates: tuple[AggregateMediationRecord, ...]
    correlations: tuple[CorrelationRecord, ...]
    true_alpha: np.ndarray
    true_beta: np.ndarray
    studies: tuple[IPDStudy, ...] = field(default=(), repr=False)


def _correlations(study: IPDStudy) -> tuple[float, float, float]:
    c = np.corrcoef(np.vstack([study.x, study.m, study.y]))
    return float(c[0, 2]), float(c[0, 1]), float(c[1, 2])


def generate_aggregates(
    base: DGPConfig,
    k_studies: int,
    seed: int,
    tau2: float | None = None,
    between_cov: Sequence[Sequence[float]] | None = None,
    keep_ipd: bool = False,
) -> AggregateSet:
    """Simulate ``k_studies`` trials and reduce each to reported summaries.

    Study-level (alpha1_i, beta2_i) come either from ``tau2`` (heterogeneity
    of the product alpha1*beta2, carried by alpha1 with beta2 fixed) or
    from a 2x2 ``between_cov`` for (alpha1, beta2). Neither gives
    homogeneous studies.
    """
    if k_studies < 2:
        raise ValidationError("k_studies must be >= 2")
    if tau2 is not None and between_cov is not None:
        raise ValidationError("give tau2 or between_cov, not both")
    aggs, cors, studies, ta, tb = [], [], [], [], []
    adjust = base.covariate_names
    for i in range(k_studies):
        rng = stream(seed, "aggregates", i)
        a_i, b_i = base.alpha1, base.beta2
        if tau2 is not None and tau2 > 0:
            if base.beta2 == 0:
                raise ValidationError("tau2 heterogeneity needs beta2 != 0")
            theta_i = rng.normal(base.alpha1 * base.beta2, math.sqrt(tau2))
            a_i = theta_i / base.beta2
        elif between_cov is not None:
            a_i, b_i = rng.multivariate_normal([base.alpha1, base.beta2], between_cov, method="eigh")
        cfg = base.replace(alpha1=float(a_i), beta2=float(b_i), seed=int(rng.integers(2 ** 62)))
        sid = f"S{i + 1:03d}"
        study = generate_study(cfg, sid)
        wm = fit_working_models(study, adjust)
        theta, se = product_of_coefficients(wm)
        aggs.append(AggregateMediationRecord(
            study_id=sid, theta_hat=theta, se_theta=se, n=study.n,
            a_hat=wm.alpha1, se_a=wm.mediator.se_alpha1,
            b_hat=wm.beta2, se_b=wm.outcome.se_beta2,
        ))
        r_xy, r_xm, r_my = _correlations(study)
        cors.append(CorrelationRecord(study_id=sid, n=study.n, r_xy=r_xy, r_xm=r_xm, r_my=r_my))
        ta.append(a_i)
        tb.append(b_i)
        if keep_ipd:
            studies.append(study)
    return AggregateSet(tuple(aggs), tuple(cors), np.array(ta), np.array(tb), tuple(studies))


def simulate_standardized(path: PathModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """(x, m, y) columns from the standardized single-mediator system.

    X is a 1:1 randomized binary treatment, standardized to unit variance.
    """
    a, b, c = path.a, path.b, path.c_prime
    explained = c * c + b * b + 2 * a * b * c
    if explained >= 1 or a * a >= 1:
        raise ValidationError(f"path model {path} leaves no residual variance")
    xs = 2.0 * rng.binomial(1, 0.5, n) - 1.0
    m = a * xs + math.sqrt(1 - a * a) * rng.standard_normal(n)
    y = c * xs + b * m + math.sqrt(1 - explained) * rng.standard_normal(n)
    return np.column_stack([xs, m, y])


def generate_correlation_records(
    path: PathModel,
    k_studies: int,
    n: int,
    seed: int,
    mcar: float = 0.0,
    path_sd: float = 0.0,
) -> list[CorrelationRecord]:
    """Sample correlation records, deleting each entry with probability ``mcar``.

    ``path_sd`` perturbs (a, b, c') per study to create between-study
    heterogeneity. Every record keeps at least one correlation.
    """
    if not 0 <= mcar < 1:
        raise ValidationError("mcar must lie in [0, 1)")
    out = []
    for i in range(k_studies):
        rng = stream(seed, "correlations", i)
        p = path
        if path_sd > 0:
            a, b, c = np.array([path.a, path.b, path.c_prime]) + rng.normal(0, path_sd, 3)
            p = PathModel(float(a), float(b), float(c))
        data = simulate_standardized(p, n, rng)
        c = np.corrcoef(data.T)
        r = [float(c[0, 2]), float(c[0, 1]), float(c[1, 2])]
        keep = rng.random(3) >= mcar
        while not keep.any():
            keep = rng.random(3) >= mcar
        r = [v if kp else None for v, kp in zip(r, keep)]
        out.append(CorrelationRecord(f"S{i + 1:03d}", n, r_xy=r[0], r_xm=r[1], r_my=r[2]))
    return out
