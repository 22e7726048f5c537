"""Bring X-M-only trials into the indirect-effect synthesis.

The outcome model comes from a trial k with full mediation data; the
mediator model comes from a trial j that only measured X and M. Composing
the two and averaging over either trial's covariate rows gives:

* ``eta_j`` / ``delta_jk``: averaged over trial j's rows
* ``eta_k`` / ``gamma_jk``: averaged over trial k's rows

The gamma/delta variants only differ in that the two trials used
different treatment versions; the computation is the same.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ._rng import stream
from .core import IPDStudy, MetaResult
from .errors import MissingMediatorError, MixedEstimandError, ValidationError
from .ipd_transport import (
    DECLARED_ASSUMPTIONS,
    _bootstrap_se,
    _check_contrast,
    _shared_schema,
    counterfactual_means,
    nie_from_means,
)
from .meta_engines import fixed_effect_meta, random_effect_meta
from .within_study import fit_mediator_model, fit_outcome_model

ESTIMANDS = ("eta_j", "eta_k", "gamma_jk", "delta_jk")
_ON_MEDIATOR_ROWS = {"eta_j", "delta_jk"}
DEFAULT_BOOTSTRAP = 500
MEDIATOR_CONFOUNDING_ASSUMPTION = (
    "covariates measured in the X-M trial suffice to adjust for "
    "mediator-outcome confounding"
)


@dataclass(frozen=True)
class HybridEstimate:
    outcome_study: str
    mediator_study: str
    standardize_to: str
    estimand: str
    value: float
    se: float
    x: int
    x_star: int
    counterfactual_means: dict[str, float]
    outcome_version: str = ""
    mediator_version: str = ""
    n_boot: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.estimand not in ESTIMANDS:
            raise ValidationError(f"unknown estimand {self.estimand!r}")
        expected = (self.mediator_study if self.estimand in _ON_MEDIATOR_ROWS
                    else self.outcome_study)
        if self.standardize_to != expected:
            raise ValidationError(
                f"{self.estimand} must be standardized to study {expected}")

    def to_dict(self) -> dict:
        return {
            "outcome_study": self.outcome_study,
            "mediator_study": self.mediator_study,
            "standardize_to": self.standardize_to,
            "estimand": self.estimand,
            "value": self.value,
            "se": self.se,
            "x": self.x,
            "x_star": self.x_star,
            "counterfactual_means": dict(self.counterfactual_means),
            "outcome_treatment_version": self.outcome_version,
            "mediator_treatment_version": self.mediator_version,
            "n_boot": self.n_boot,
            "seed": self.seed,
            "declared_assumptions": [*DECLARED_ASSUMPTIONS, MEDIATOR_CONFOUNDING_ASSUMPTION],
        }


def hybrid_nie(
    outcome_study: IPDStudy,
    mediator_study: IPDStudy,
    estimand: str = "eta_j",
    x: int = 0,
    x_star: int = 1,
    interaction: bool = False,
    n_boot: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
) -> HybridEstimate:
    """Natural indirect effect from k's outcome model and j's mediator model.

    The bootstrap resamples both trials' rows independently.
    """
    if estimand not in ESTIMANDS:
        raise ValidationError(f"unknown estimand {estimand!r}")
    _check_contrast(x, x_star)
    names = _shared_schema(outcome_study, mediator_study)
    for study in (outcome_study, mediator_study):
        if not np.all(np.isfinite(study.m)):
            raise MissingMediatorError(f"study {study.study_id} lacks mediator values")
    on_mediator_rows = estimand in _ON_MEDIATOR_ROWS

    def estimate(k: IPDStudy, j: IPDStudy) -> tuple[float, dict[str, float]]:
        outcome = fit_outcome_model(k, names, interaction)
        mediator = fit_mediator_model(j, names)
        rows = (j if on_mediator_rows else k).covariates(names)
        means = counterfactual_means(mediator, outcome, rows, x, x_star)
        return nie_from_means(means, x, x_star), means

    value, means = estimate(outcome_study, mediator_study)
    reps = np.empty(n_boot)
    key = (outcome_study.study_id, mediator_study.study_id)
    for r in range(n_boot):
        rng = stream(seed, "hybrid", *key, r)
        rk = rng.integers(0, outcome_study.n, outcome_study.n)
        rj = rng.integers(0, mediator_study.n, mediator_study.n)
        try:
            reps[r] = estimate(outcome_study.subset(rk), mediator_study.subset(rj))[0]
        except ValidationError:
            reps[r] = np.nan
    return HybridEstimate(
        outcome_study=outcome_study.study_id,
        mediator_study=mediator_study.study_id,
        standardize_to=mediator_study.study_id if on_mediator_rows else outcome_study.study_id,
        estimand=estimand,
        value=value,
        se=_bootstrap_se(reps),
        x=x,
        x_star=x_star,
        counterfactual_means=means,
        outcome_version=outcome_study.treatment_version,
        mediator_version=mediator_study.treatment_version,
        n_boot=n_boot,
        seed=seed,
    )


def summarize_eta(
    estimates: Sequence[HybridEstimate], estimand: str | None = None, scheme: str = "fixed",
    method: str = "dl",
) -> MetaResult:
    """Pool hybrid estimates sharing one estimand and standardization target."""
    estimates = list(estimates)
    if not estimates:
        raise ValidationError("no estimates given")
    kinds = {e.estimand for e in estimates}
    if estimand is not None:
        kinds.add(estimand)
    if len(kinds) > 1:
        raise MixedEstimandError(f"cannot pool different estimands: {sorted(kinds)}")
    targets = {e.standardize_to for e in estimates}
    if len(targets) > 1:
        raise MixedEstimandError(f"estimates standardize to different studies: {sorted(targets)}")
    contrasts = {(e.x, e.x_star) for e in estimates}
    if len(contrasts) > 1:
        raise MixedEstimandError(f"estimates use different (x, x*) contrasts: {sorted(contrasts)}")
    kind, target = kinds.pop(), targets.pop()
    label = f"{kind} summary; reflects the indirect effect in the population of study {target}"
    values = [e.value for e in estimates]
    variances = [e.se ** 2 for e in estimates]
    # the study that varies across the pooled estimates labels each row
    ids = [e.outcome_study if kind in _ON_MEDIATOR_ROWS else e.mediator_study
           for e in estimates]
    if scheme == "fixed":
        return fixed_effect_meta(values, variances, study_ids=ids, label=label)
    if scheme == "random":
        return random_effect_meta(values, variances, method=method, study_ids=ids, label=label)
    raise ValidationError(f"unknown scheme {scheme!r}")
