import numpy as np
import pytest

from medmeta.core import IPDStudy
from medmeta.errors import CovariateSchemaError, MixedEstimandError, ValidationError
from medmeta.ipd_transport import standardized_nie
from medmeta.simlab import DGPConfig, Dist, generate_study, true_nie_oracle
from medmeta.xm_integration import (
    MEDIATOR_CONFOUNDING_ASSUMPTION,
    HybridEstimate,
    hybrid_nie,
    summarize_eta,
)

BASE = DGPConfig(alpha1=0.5, alpha2=(0.4,), beta2=0.4, beta3=(0.3,),
                 l_dist=(Dist.normal(0, 1),), n=1500, seed=1)


def xm_only(study: IPDStudy, sid: str | None = None) -> IPDStudy:
    return IPDStudy(sid or study.study_id, x=study.x, m=study.m, l=study.l,
                    covariate_names=study.covariate_names)


def estimate(value=0.2, se=0.05, estimand="eta_j", outcome="k", mediator="j", target=None):
    if target is None:
        target = mediator if estimand in ("eta_j", "delta_jk") else outcome
    return HybridEstimate(outcome, mediator, target, estimand, value, se, 0, 1, {})


@pytest.fixture(scope="module")
def pair():
    k = generate_study(BASE, "k")
    j = xm_only(generate_study(BASE.replace(seed=2, alpha1=0.3), "j"))
    return k, j


class TestHybridNIE:
    def test_same_study_equals_transport(self):
        k = generate_study(BASE, "k")
        hyb = hybrid_nie(k, k, "eta_k", n_boot=20)
        std = standardized_nie(k, k, n_boot=20)
        assert hyb.value == pytest.approx(std.theta_jk, abs=1e-8)

    def test_swapping_contrast_negates(self, pair):
        k, j = pair
        fwd = hybrid_nie(k, j, x=0, x_star=1, n_boot=20)
        back = hybrid_nie(k, j, x=1, x_star=0, n_boot=20)
        assert back.value == pytest.approx(-fwd.value, abs=1e-12)

    def test_eta_j_and_eta_k_with_identical_rows(self):
        k = generate_study(BASE, "k")
        other = generate_study(BASE.replace(seed=5), "j")
        j = IPDStudy("j", x=k.x, m=other.m, l=k.l, covariate_names=k.covariate_names)
        a = hybrid_nie(k, j, "eta_j", n_boot=20)
        b = hybrid_nie(k, j, "eta_k", n_boot=20)
        assert a.value == pytest.approx(b.value, abs=1e-8)

    def test_composition_recovers_012(self, pair):
        k, j = pair
        est = hybrid_nie(k, j, "eta_j", n_boot=200, seed=3)
        assert abs(est.value - 0.12) < 2 * est.se

    def test_composition_matches_oracle(self, pair):
        # the mechanisms behind the hybrid: mediator of j, outcome of k
        k, j = pair
        mech = BASE.replace(alpha1=0.3)
        truth, mc_se = true_nie_oracle(mech, j, 0, 1, mc_n=200_000, seed=1)
        assert truth == pytest.approx(0.12, abs=3 * mc_se)
        est = hybrid_nie(k, j, "eta_j", n_boot=200, seed=3)
        assert abs(est.value - truth) < 2 * np.hypot(est.se, mc_se)

    def test_zero_mediator_path(self):
        k = generate_study(BASE, "k")
        j = xm_only(generate_study(BASE.replace(alpha1=0.0, seed=9), "j"))
        est = hybrid_nie(k, j, n_boot=200, seed=1)
        assert abs(est.value) < 2 * est.se

    def test_version_variants_share_the_computation(self):
        k = generate_study(BASE, "k", treatment_version="v1")
        j = xm_only(generate_study(BASE.replace(seed=2), "j"))
        j = IPDStudy("j", x=j.x, m=j.m, l=j.l, covariate_names=j.covariate_names,
                     treatment_version="v2")
        assert hybrid_nie(k, j, "delta_jk", n_boot=20).value == hybrid_nie(k, j, "eta_j", n_boot=20).value
        g = hybrid_nie(k, j, "gamma_jk", n_boot=20)
        assert g.value == hybrid_nie(k, j, "eta_k", n_boot=20).value
        assert (g.outcome_version, g.mediator_version, g.standardize_to) == ("v1", "v2", "k")

    def test_bootstrap_deterministic(self, pair):
        k, j = pair
        assert hybrid_nie(k, j, n_boot=30, seed=2).se == hybrid_nie(k, j, n_boot=30, seed=2).se

    def test_outcome_study_needs_outcome(self, pair):
        k, j = pair
        with pytest.raises(ValidationError):
            hybrid_nie(j, k, n_boot=20)

    def test_schema_mismatch(self, pair):
        k, _ = pair
        other = xm_only(generate_study(BASE.replace(covariate_names=("age",)), "j"))
        with pytest.raises(CovariateSchemaError):
            hybrid_nie(k, other, n_boot=20)

    def test_unknown_estimand(self, pair):
        k, j = pair
        with pytest.raises(ValidationError):
            hybrid_nie(k, j, "theta", n_boot=20)

    def test_report_declares_confounding_assumption(self, pair):
        k, j = pair
        d = hybrid_nie(k, j, n_boot=20).to_dict()
        assert MEDIATOR_CONFOUNDING_ASSUMPTION in d["declared_assumptions"]
        assert d["standardize_to"] == "j"


class TestHybridEstimate:
    @pytest.mark.parametrize("estimand,target", [("eta_j", "k"), ("delta_jk", "k"),
                                                 ("eta_k", "j"), ("gamma_jk", "j")])
    def test_wrong_standardization_target(self, estimand, target):
        with pytest.raises(ValidationError):
            estimate(estimand=estimand, target=target)

    def test_unknown_estimand(self):
        with pytest.raises(ValidationError):
            estimate(estimand="eta", target="j")


class TestSummarize:
    def test_identical_inputs(self):
        ests = [estimate(0.15, 0.04, outcome=f"k{i}") for i in range(3)]
        for scheme in ("fixed", "random"):
            res = summarize_eta(ests, scheme=scheme)
            assert res.estimate == pytest.approx(0.15)
            assert "population of study j" in res.label
        assert summarize_eta(ests).study_ids == ("k0", "k1", "k2")

    def test_mixed_estimands(self):
        with pytest.raises(MixedEstimandError):
            summarize_eta([estimate(estimand="eta_j"), estimate(estimand="eta_k")])

    def test_requested_estimand_must_match(self):
        with pytest.raises(MixedEstimandError):
            summarize_eta([estimate(), estimate(outcome="k2")], estimand="eta_k")

    def test_mixed_targets(self):
        with pytest.raises(MixedEstimandError):
            summarize_eta([estimate(mediator="j1"), estimate(mediator="j2")])

    def test_unknown_scheme(self):
        with pytest.raises(ValidationError):
            summarize_eta([estimate(), estimate(outcome="k2")], scheme="bayes")

    def test_three_outcome_studies(self):
        j = xm_only(generate_study(BASE.replace(seed=50, alpha1=0.3), "j"))
        ests = [hybrid_nie(generate_study(BASE.replace(seed=60 + i), f"k{i}"), j,
                           n_boot=150, seed=i) for i in range(3)]
        res = summarize_eta(ests)
        assert abs(res.estimate - 0.12) < 2 * res.se
