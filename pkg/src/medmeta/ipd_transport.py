"""Case-mix standardized indirect effects from individual participant data.

theta(j, k) is study k's natural indirect effect averaged over the
covariate distribution of study j:

    E[Y(x, M(x*)) | S=j] - E[Y(x, M(x)) | S=j]

Each counterfactual mean is obtained by plugging study j's covariate rows
into study k's outcome model with the mediator integrated out under
study k's mediator model. Because the outcome model is linear in M, the
integral is exact.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from ._rng import stream
from .core import IPDStudy, MetaResult
from .errors import CovariateSchemaError, MixedTargetError, ValidationError
from .meta_engines import random_effect_meta
from .within_study import (
    MediatorModel,
    OutcomeModel,
    fit_working_models,
)

DEFAULT_BOOTSTRAP = 500
POSITIVITY_THRESHOLD = 0.95
DECLARED_ASSUMPTIONS = (
    "consistency",
    "within-trial ignorability",
    "between-trial ignorability given L",
    "no unmeasured mediator-outcome confounders within each study",
    "within-study cross-world independence",
)


@dataclass(frozen=True)
class PositivityReport:
    containment: dict[str, float]
    flagged: bool
    threshold: float = POSITIVITY_THRESHOLD

    def to_dict(self) -> dict:
        return {"containment": dict(self.containment), "flagged": self.flagged,
                "threshold": self.threshold}


def _shared_schema(a: IPDStudy, b: IPDStudy) -> tuple[str, ...]:
    if set(a.covariate_names) != set(b.covariate_names):
        raise CovariateSchemaError(
            f"studies {a.study_id} and {b.study_id} have different covariates: "
            f"{sorted(a.covariate_names)} vs {sorted(b.covariate_names)}"
        )
    return a.covariate_names


def check_positivity(source: IPDStudy, target: IPDStudy) -> PositivityReport:
    """Share of target rows inside the source's [min, max] range, per covariate."""
    names = _shared_schema(source, target)
    ls, lt = source.covariates(names), target.covariates(names)
    containment = {}
    for j, name in enumerate(names):
        lo, hi = ls[:, j].min(), ls[:, j].max()
        containment[name] = float(np.mean((lt[:, j] >= lo) & (lt[:, j] <= hi)))
    flagged = any(v < POSITIVITY_THRESHOLD for v in containment.values())
    return PositivityReport(containment, flagged)


def counterfactual_mean(
    mediator: MediatorModel, outcome: OutcomeModel, l_target: np.ndarray, x: int, x_star: int
) -> float:
    """Average over target rows of E[Y(x, M(x*)) | L] under the two working models."""
    m_bar = mediator.mean(x_star, l_target)
    return float(np.mean(outcome.mean(x, m_bar, l_target)))


def counterfactual_means(
    mediator: MediatorModel, outcome: OutcomeModel, l_target: np.ndarray, x: int, x_star: int
) -> dict[str, float]:
    """All four E[Y(a, M(b))] for a, b in {x, x*}, keyed ``"Y(a,M(b))"``."""
    out = {}
    for a in (x, x_star):
        for b in (x, x_star):
            out[f"Y({a},M({b}))"] = counterfactual_mean(mediator, outcome, l_target, a, b)
    return out


def nie_from_means(means: dict[str, float], x: int, x_star: int) -> float:
    return means[f"Y({x},M({x_star}))"] - means[f"Y({x},M({x}))"]


@dataclass(frozen=True)
class TransportEstimate:
    source_study: str
    target_study: str
    x: int
    x_star: int
    theta_jk: float
    se: float
    counterfactual_means: dict[str, float]
    method: str
    n_boot: int = 0
    seed: int = 0
    source_version: str = ""
    positivity: PositivityReport | None = None
    assumptions: tuple[str, ...] = field(default=DECLARED_ASSUMPTIONS)

    def to_dict(self) -> dict:
        return {
            "source_study": self.source_study,
            "target_study": self.target_study,
            "x": self.x,
            "x_star": self.x_star,
            "theta_jk": self.theta_jk,
            "se": self.se,
            "counterfactual_means": dict(self.counterfactual_means),
            "method": self.method,
            "n_boot": self.n_boot,
            "seed": self.seed,
            "source_treatment_version": self.source_version,
            "positivity": None if self.positivity is None else self.positivity.to_dict(),
            "declared_assumptions": list(self.assumptions),
            "se_method": "nonparametric bootstrap over source rows, target rows fixed",
        }


def _check_contrast(x: int, x_star: int) -> None:
    if x not in (0, 1) or x_star not in (0, 1):
        raise ValidationError("x and x_star must be 0 or 1")


def _bootstrap_se(values: np.ndarray) -> float:
    values = values[np.isfinite(values)]
    if values.size < 2:
        raise ValidationError("too few successful bootstrap replicates")
    se = float(values.std(ddof=1))
    # a degenerate contrast (x == x*) has zero spread; keep se strictly positive
    return se if se > 0 else math.ulp(1.0)


def standardized_nie(
    source: IPDStudy,
    target: IPDStudy,
    x: int = 0,
    x_star: int = 1,
    interaction: bool = False,
    xl_interaction: bool = False,
    n_boot: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
) -> TransportEstimate:
    """Estimate theta(j, k) with k = ``source`` and j = ``target``.

    Working models in the source adjust for all shared covariates. The
    standard error comes from ``n_boot`` nonparametric bootstrap resamples
    of the source rows; replicate r uses stream ``(seed, r)``.
    """
    _check_contrast(x, x_star)
    names = _shared_schema(source, target)
    positivity = check_positivity(source, target)
    l_target = target.covariates(names)

    def estimate(study: IPDStudy) -> tuple[float, dict[str, float]]:
        wm = fit_working_models(study, names, interaction, xl_interaction)
        means = counterfactual_means(wm.mediator, wm.outcome, l_target, x, x_star)
        return nie_from_means(means, x, x_star), means

    theta, means = estimate(source)
    reps = np.empty(n_boot)
    for r in range(n_boot):
        rows = stream(seed, "transport", source.study_id, target.study_id, r).integers(0, source.n, source.n)
        try:
            reps[r] = estimate(source.subset(rows))[0]
        except ValidationError:
            reps[r] = np.nan
    linear = not interaction and not xl_interaction
    return TransportEstimate(
        source_study=source.study_id,
        target_study=target.study_id,
        x=x,
        x_star=x_star,
        theta_jk=theta,
        se=_bootstrap_se(reps),
        counterfactual_means=means,
        method="closed_form_linear" if linear else "nem_gcomp",
        n_boot=n_boot,
        seed=seed,
        source_version=source.treatment_version,
        positivity=positivity,
    )


def population_specific_meta(
    estimates: Sequence[TransportEstimate], method: str = "dl"
) -> MetaResult:
    """Random-effects pooling of theta(j, k) over sources k for one target j."""
    estimates = list(estimates)
    if not estimates:
        raise ValidationError("no estimates given")
    targets = {e.target_study for e in estimates}
    contrasts = {(e.x, e.x_star) for e in estimates}
    if len(targets) > 1:
        raise MixedTargetError(f"estimates standardize to different targets: {sorted(targets)}")
    if len(contrasts) > 1:
        raise MixedTargetError(f"estimates use different (x, x*) contrasts: {sorted(contrasts)}")
    return random_effect_meta(
        [e.theta_jk for e in estimates],
        [e.se ** 2 for e in estimates],
        method=method,
        study_ids=[e.source_study for e in estimates],
        label=f"population-specific meta-analysis, target {targets.pop()}",
    )
