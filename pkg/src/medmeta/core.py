"""Shared domain types and the validated study collection.

All record types are frozen dataclasses. Arrays held by :class:`IPDStudy`
are marked read-only so a study can be shared freely between tasks.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from .errors import (
    CovariateSchemaError,
    DegenerateArmError,
    DuplicateStudyError,
    InadmissiblePathError,
    ValidationError,
)

CORRELATION_ORDER = ("r_xy", "r_xm", "r_my")
META_METHODS = ("fixed", "dl", "reml")
PSD_TOL = 1e-10


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValidationError(f"{name} must be finite, got {value!r}")
    return value


def _positive(name: str, value: float) -> float:
    value = _finite(name, value)
    if value <= 0:
        raise ValidationError(f"{name} must be > 0, got {value!r}")
    return value


def _optional(fn, name: str, value: float | None) -> float | None:
    return None if value is None else fn(name, value)


def is_psd(matrix: np.ndarray, tol: float = PSD_TOL) -> bool:
    matrix = np.asarray(matrix, dtype=float)
    if not np.allclose(matrix, matrix.T, atol=tol):
        return False
    return bool(np.linalg.eigvalsh(matrix).min() >= -tol)


def correlation_matrix(r_xy: float, r_xm: float, r_my: float) -> np.ndarray:
    """3x3 correlation matrix in (X, M, Y) order."""
    return np.array(
        [[1.0, r_xm, r_xy],
         [r_xm, 1.0, r_my],
         [r_xy, r_my, 1.0]]
    )


@dataclass(frozen=True)
class AggregateMediationRecord:
    """One study's reported indirect effect, optionally with its path estimates."""

    study_id: str
    theta_hat: float
    se_theta: float
    n: int
    a_hat: float | None = None
    se_a: float | None = None
    b_hat: float | None = None
    se_b: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "study_id", str(self.study_id))
        object.__setattr__(self, "theta_hat", _finite("theta_hat", self.theta_hat))
        object.__setattr__(self, "se_theta", _positive("se_theta", self.se_theta))
        if int(self.n) != self.n or self.n <= 0:
            raise ValidationError(f"n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        for est, se in (("a_hat", "se_a"), ("b_hat", "se_b")):
            e, s = getattr(self, est), getattr(self, se)
            if (e is None) != (s is None):
                raise ValidationError(f"{est} and {se} must be given together")
            object.__setattr__(self, est, _optional(_finite, est, e))
            object.__setattr__(self, se, _optional(_positive, se, s))

    @property
    def has_paths(self) -> bool:
        return self.a_hat is not None and self.b_hat is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "study_id": self.study_id,
            "theta_hat": self.theta_hat,
            "se_theta": self.se_theta,
            "n": self.n,
            "a_hat": self.a_hat,
            "se_a": self.se_a,
            "b_hat": self.b_hat,
            "se_b": self.se_b,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AggregateMediationRecord:
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__})

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> AggregateMediationRecord:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class CorrelationRecord:
    """Sample correlations (r_xy, r_xm, r_my) of one study; absent entries are ``None``.

    ``sigma`` is the optional 3x3 within-study sampling covariance in the same
    order, zero in rows/columns of absent correlations.
    """

    study_id: str
    n: int
    r_xy: float | None = None
    r_xm: float | None = None
    r_my: float | None = None
    sigma: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "study_id", str(self.study_id))
        if int(self.n) != self.n or self.n <= 0:
            raise ValidationError(f"n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))
        for name in CORRELATION_ORDER:
            r = getattr(self, name)
            if r is None:
                continue
            r = _finite(name, r)
            if not -1.0 <= r <= 1.0:
                raise ValidationError(f"{name}={r} outside [-1, 1]")
            object.__setattr__(self, name, r)
        present = self.observed
        if not present.any():
            raise ValidationError(f"study {self.study_id}: no correlation present")
        if present.all() and not is_psd(correlation_matrix(*self.vector)):
            raise ValidationError(
                f"study {self.study_id}: correlation matrix is not positive semidefinite"
            )
        if self.sigma is not None:
            s = np.asarray(self.sigma, dtype=float)
            if s.shape != (3, 3) or not np.all(np.isfinite(s)):
                raise ValidationError("sigma must be a finite 3x3 matrix")
            if not is_psd(s):
                raise ValidationError("sigma must be symmetric PSD")
            if np.any(s[~present, :] != 0) or np.any(s[:, ~present] != 0):
                raise ValidationError("sigma must be zero in rows/columns of absent correlations")
            object.__setattr__(self, "sigma", tuple(tuple(float(v) for v in row) for row in s))

    @property
    def vector(self) -> np.ndarray:
        """Correlations as a float array with NaN for absent entries."""
        return np.array([np.nan if v is None else v for v in
                         (self.r_xy, self.r_xm, self.r_my)])

    @property
    def observed(self) -> np.ndarray:
        return np.array([v is not None for v in (self.r_xy, self.r_xm, self.r_my)])

    def to_dict(self) -> dict[str, Any]:
        return {
            "study_id": self.study_id,
            "n": self.n,
            "r_xy": self.r_xy,
            "r_xm": self.r_xm,
            "r_my": self.r_my,
            "sigma": None if self.sigma is None else [list(r) for r in self.sigma],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> CorrelationRecord:
        kw = {k: d.get(k) for k in cls.__dataclass_fields__}
        if kw["sigma"] is not None:
            kw["sigma"] = tuple(tuple(r) for r in kw["sigma"])
        return cls(**kw)

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> CorrelationRecord:
        return cls.from_dict(json.loads(text))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class IPDStudy:
    """Participant-level data of one trial.

    ``exposure="binary"`` (the default) requires x in {0, 1} with both arms
    present. ``"continuous"`` is used by the standardized-coefficient demo,
    where x is a measured exposure such as blood pressure.
    """

    study_id: str
    x: np.ndarray
    m: np.ndarray
    l: np.ndarray
    covariate_names: tuple[str, ...]
    y: np.ndarray | None = None
    treatment_version: str = ""
    exposure: str = "binary"

    def __post_init__(self) -> None:
        object.__setattr__(self, "study_id", str(self.study_id))
        object.__setattr__(self, "covariate_names", tuple(str(c) for c in self.covariate_names))
        x = _frozen(np.ravel(self.x))
        m = _frozen(np.ravel(self.m))
        n = x.shape[0]
        l = np.asarray(self.l, dtype=float)
        if l.ndim == 1 and len(self.covariate_names) == 0 and l.size == 0:
            l = l.reshape(n, 0)
        if l.ndim == 1:
            l = l.reshape(n, -1)
        d = len(self.covariate_names)
        if l.shape != (n, d):
            raise CovariateSchemaError(
                f"study {self.study_id}: covariate block has shape {l.shape}, "
                f"expected ({n}, {d}) for names {list(self.covariate_names)}"
            )
        if len(set(self.covariate_names)) != d:
            raise CovariateSchemaError(f"study {self.study_id}: duplicate covariate names")
        if m.shape[0] != n:
            raise ValidationError(f"study {self.study_id}: x and m lengths differ")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(l)):
            raise ValidationError(f"study {self.study_id}: non-finite x or covariate values")
        y = self.y
        if y is not None:
            y = _frozen(np.ravel(y))
            if y.shape[0] != n:
                raise ValidationError(f"study {self.study_id}: y length differs from x")
            if not np.all(np.isfinite(y)):
                raise ValidationError(f"study {self.study_id}: non-finite outcome values")
        if self.exposure == "binary":
            if not np.all((x == 0) | (x == 1)):
                raise ValidationError(f"study {self.study_id}: x must be 0/1")
            n1 = int(x.sum())
            if n1 < 2 or n - n1 < 2:
                raise DegenerateArmError(
                    f"study {self.study_id}: needs >= 2 observations per arm "
                    f"(treated={n1}, control={n - n1})"
                )
        elif self.exposure == "continuous":
            if n < 3 or np.ptp(x) == 0:
                raise DegenerateArmError(f"study {self.study_id}: exposure does not vary")
        else:
            raise ValidationError(f"unknown exposure kind {self.exposure!r}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "l", _frozen(l))
        object.__setattr__(self, "treatment_version", str(self.treatment_version))

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def d(self) -> int:
        return len(self.covariate_names)

    @property
    def has_outcome(self) -> bool:
        return self.y is not None

    def covariates(self, names: Sequence[str]) -> np.ndarray:
        """Columns of L for ``names`` (in that order)."""
        idx = []
        for name in names:
            try:
                idx.append(self.covariate_names.index(name))
            except ValueError:
                raise CovariateSchemaError(
                    f"study {self.study_id}: unknown covariate {name!r}"
                ) from None
        return self.l[:, idx]

    def reorder(self, names: Sequence[str]) -> IPDStudy:
        """Same study with covariate columns in the order given by ``names``."""
        if sorted(names) != sorted(self.covariate_names):
            raise CovariateSchemaError(
                f"study {self.study_id}: covariates {sorted(self.covariate_names)} "
                f"do not match {sorted(names)}"
            )
        return self.subset(np.arange(self.n), names=names)

    def subset(self, rows: np.ndarray, names: Sequence[str] | None = None) -> IPDStudy:
        names = self.covariate_names if names is None else tuple(names)
        return IPDStudy(
            study_id=self.study_id,
            x=self.x[rows],
            m=self.m[rows],
            y=None if self.y is None else self.y[rows],
            l=self.covariates(names)[rows],
            covariate_names=names,
            treatment_version=self.treatment_version,
            exposure=self.exposure,
        )

    @classmethod
    def from_rows(
        cls,
        study_id: str,
        rows: Iterable[tuple],
        covariate_names: Sequence[str],
        treatment_version: str = "",
        exposure: str = "binary",
    ) -> IPDStudy:
        """Build from ``(x, m, y, l)`` tuples; ``y`` is ``None`` for X-M-only studies."""
        rows = list(rows)
        ys = [r[2] for r in rows]
        if any(v is None for v in ys) and not all(v is None for v in ys):
            raise ValidationError(f"study {study_id}: outcome present in some rows only")
        d = len(covariate_names)
        return cls(
            study_id=study_id,
            x=np.array([r[0] for r in rows], dtype=float),
            m=np.array([r[1] for r in rows], dtype=float),
            y=None if ys and ys[0] is None else np.array(ys, dtype=float),
            l=np.array([list(r[3]) for r in rows], dtype=float).reshape(len(rows), d),
            covariate_names=tuple(covariate_names),
            treatment_version=treatment_version,
            exposure=exposure,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "study_id": self.study_id,
            "treatment_version": self.treatment_version,
            "exposure": self.exposure,
            "covariate_names": list(self.covariate_names),
            "x": self.x.tolist(),
            "m": self.m.tolist(),
            "y": None if self.y is None else self.y.tolist(),
            "l": self.l.tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> IPDStudy:
        names = tuple(d["covariate_names"])
        return cls(
            study_id=d["study_id"],
            x=np.asarray(d["x"], dtype=float),
            m=np.asarray(d["m"], dtype=float),
            y=None if d.get("y") is None else np.asarray(d["y"], dtype=float),
            l=np.asarray(d["l"], dtype=float).reshape(len(d["x"]), len(names)),
            covariate_names=names,
            treatment_version=d.get("treatment_version", ""),
            exposure=d.get("exposure", "binary"),
        )

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> IPDStudy:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PathModel:
    """Standardized single-mediator path coefficients."""

    a: float
    b: float
    c_prime: float

    def __post_init__(self) -> None:
        for name in ("a", "b", "c_prime"):
            object.__setattr__(self, name, _finite(name, getattr(self, name)))
        if not is_psd(correlation_matrix(*self.implied())):
            raise InadmissiblePathError(
                f"path model {self} implies a non-PSD correlation matrix"
            )

    def implied(self) -> tuple[float, float, float]:
        """(rho_xy, rho_xm, rho_my) by path tracing."""
        a, b, c = self.a, self.b, self.c_prime
        return (c + a * b, a, b + a * c)

    @property
    def indirect(self) -> float:
        return self.a * self.b

    def to_dict(self) -> dict[str, float]:
        return {"a": self.a, "b": self.b, "c_prime": self.c_prime}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> PathModel:
        return cls(a=d["a"], b=d["b"], c_prime=d["c_prime"])

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> PathModel:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class MetaResult:
    """Pooled estimate of a univariate (fixed or random-effects) meta-analysis."""

    estimate: float
    se: float
    tau2: float
    ci_low: float
    ci_high: float
    weights: tuple[float, ...]
    k_studies: int
    method: str
    study_ids: tuple[str, ...] = ()
    study_estimates: tuple[float, ...] = ()
    study_variances: tuple[float, ...] = ()
    q_statistic: float | None = None
    label: str = ""

    def __post_init__(self) -> None:
        if self.method not in META_METHODS:
            raise ValidationError(f"unknown meta-analysis method {self.method!r}")
        if not self.se > 0:
            raise ValidationError("se must be > 0")
        if self.tau2 < 0:
            raise ValidationError("tau2 must be >= 0")
        if self.method == "fixed" and self.tau2 != 0.0:
            raise ValidationError("fixed-effect result must have tau2 == 0")
        if not self.ci_low <= self.estimate <= self.ci_high:
            raise ValidationError("confidence interval must contain the estimate")
        if len(self.weights) != self.k_studies:
            raise ValidationError("one weight per study required")
        if min(self.weights) < 0 or abs(math.fsum(self.weights) - 1.0) > 1e-12:
            raise ValidationError("weights must be nonnegative and sum to 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "estimate": self.estimate,
            "se": self.se,
            "tau2": self.tau2,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "weights": list(self.weights),
            "k_studies": self.k_studies,
            "method": self.method,
            "study_ids": list(self.study_ids),
            "study_estimates": list(self.study_estimates),
            "study_variances": list(self.study_variances),
            "q_statistic": self.q_statistic,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> MetaResult:
        kw = dict(d)
        for key in ("weights", "study_ids", "study_estimates", "study_variances"):
            kw[key] = tuple(kw.get(key, ()))
        return cls(**kw)

    def to_json(self) -> str:
        return _dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> MetaResult:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class StudyCollection(Mapping[str, IPDStudy]):
    """Validated, id-indexed studies sharing one covariate order."""

    covariate_names: tuple[str, ...]
    _studies: dict[str, IPDStudy] = field(repr=False)

    def __getitem__(self, key: str) -> IPDStudy:
        return self._studies[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._studies)

    def __len__(self) -> int:
        return len(self._studies)


def validate_collection(studies: Sequence[IPDStudy]) -> StudyCollection:
    """Check a set of IPD studies and align their covariate columns.

    Covariate columns are re-ordered to match the first study. Arm checks
    happen when each :class:`IPDStudy` is constructed; a study that somehow
    bypassed them is re-checked here.
    """
    if not studies:
        raise ValidationError("at least one study is required")
    names = studies[0].covariate_names
    out: dict[str, IPDStudy] = {}
    for study in studies:
        if study.study_id in out:
            raise DuplicateStudyError(f"duplicate study id {study.study_id!r}")
        if set(study.covariate_names) != set(names) or study.d != len(names):
            raise CovariateSchemaError(
                f"study {study.study_id} covariates {list(study.covariate_names)} "
                f"differ from {list(names)}"
            )
        if study.exposure == "binary":
            n1 = int(study.x.sum())
            if n1 < 2 or study.n - n1 < 2:
                raise DegenerateArmError(f"study {study.study_id}: single-arm study")
        out[study.study_id] = study if study.covariate_names == names else study.reorder(names)
    return StudyCollection(covariate_names=tuple(names), _studies=out)
