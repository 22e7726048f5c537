import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medmeta.core import CorrelationRecord, PathModel
from medmeta.errors import (
    ConvergenceError,
    InsufficientStudiesError,
    InvalidVarianceError,
    UnidentifiedComponentError,
)
from medmeta.masem import implied_correlations
from medmeta.meta_engines import (
    MVRELikelihood,
    Z975,
    dl_tau2,
    fixed_effect_meta,
    multivariate_re_meta,
    olkin_siotani,
    random_effect_meta,
    reml_tau2,
)
from medmeta.simlab import DGPConfig, generate_aggregates, generate_correlation_records


def dl_oracle(y, v):
    """DerSimonian-Laird written out term by term."""
    k = len(y)
    w = [1 / vi for vi in v]
    sw = sum(w)
    mu = sum(wi * yi for wi, yi in zip(w, y)) / sw
    q = sum(wi * (yi - mu) ** 2 for wi, yi in zip(w, y))
    c = sw - sum(wi * wi for wi in w) / sw
    return max(0.0, (q - (k - 1)) / c)


meta_inputs = st.integers(2, 12).flatmap(lambda k: st.tuples(
    st.lists(st.floats(-2, 2), min_size=k, max_size=k),
    st.lists(st.floats(1e-3, 1.0), min_size=k, max_size=k),
))


class TestFixedEffect:
    def test_homogeneous(self):
        r = fixed_effect_meta([0.3] * 5, [0.01] * 5)
        assert r.estimate == pytest.approx(0.3)
        assert r.weights == pytest.approx((0.2,) * 5)
        assert r.tau2 == 0.0 and r.method == "fixed"

    def test_single_study(self):
        r = fixed_effect_meta([0.5], [0.04])
        assert r.estimate == pytest.approx(0.5)
        assert r.se == pytest.approx(0.2)
        assert r.ci_low == pytest.approx(0.5 - 1.959964 * 0.2, abs=1e-6)

    def test_arithmetic(self):
        r = fixed_effect_meta([0.1, 0.5], [0.01, 0.04])
        assert r.estimate == pytest.approx(0.18)

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(InvalidVarianceError):
            fixed_effect_meta([0.1, 0.2], [0.01, 0.0])

    @given(meta_inputs, st.randoms(use_true_random=False))
    def test_order_invariance(self, data, rnd):
        y, v = data
        idx = list(range(len(y)))
        rnd.shuffle(idx)
        a = fixed_effect_meta(y, v)
        b = fixed_effect_meta([y[i] for i in idx], [v[i] for i in idx])
        assert a.estimate == pytest.approx(b.estimate, abs=1e-12)
        assert a.se == pytest.approx(b.se, rel=1e-12)


class TestRandomEffect:
    def test_dl_hand_case(self):
        assert dl_tau2([0.0, 1.0], [0.1, 0.1]) == pytest.approx(0.4)
        assert dl_oracle([0.0, 1.0], [0.1, 0.1]) == pytest.approx(0.4)
        r = random_effect_meta([0.0, 1.0], [0.1, 0.1])
        assert r.tau2 == pytest.approx(0.4)
        assert r.q_statistic == pytest.approx(5.0)

    def test_homogeneous_equals_fixed(self):
        y, v = [0.20, 0.21, 0.19, 0.20], [0.01, 0.02, 0.015, 0.01]
        r = random_effect_meta(y, v, "dl")
        f = fixed_effect_meta(y, v)
        assert r.tau2 == 0.0
        assert r.estimate == f.estimate and r.se == f.se

    def test_reml_matches_oracle(self, frozen):
        o = frozen["reml_univariate"]
        r = random_effect_meta(o["estimates"], o["variances"], "reml")
        assert r.tau2 == pytest.approx(o["tau2"], abs=1e-7)
        assert r.estimate == pytest.approx(o["estimate"], abs=1e-7)
        assert r.se == pytest.approx(o["se"], abs=1e-7)

    def test_needs_two_studies(self):
        with pytest.raises(InsufficientStudiesError):
            random_effect_meta([0.2], [0.01])

    def test_reml_non_convergence_carries_iterate(self):
        y, v = [0.0, 1.0, 3.0, -2.0], [0.1, 0.1, 0.2, 0.3]
        with pytest.raises(ConvergenceError) as info:
            reml_tau2(y, v, max_iter=1)
        assert info.value.last_iterate >= 0

    @given(meta_inputs)
    def test_dl_matches_oracle(self, data):
        y, v = data
        assert dl_tau2(y, v) == pytest.approx(dl_oracle(y, v), rel=1e-9, abs=1e-12)

    @settings(deadline=None)
    @given(meta_inputs, st.sampled_from(["dl", "reml"]), st.floats(0.1, 10))
    def test_scale_equivariance(self, data, method, c):
        y, v = data
        a = random_effect_meta(y, v, method)
        b = random_effect_meta([c * yi for yi in y], [c * c * vi for vi in v], method)
        assert b.estimate == pytest.approx(c * a.estimate, rel=1e-6, abs=1e-9)
        assert b.se == pytest.approx(c * a.se, rel=1e-6)
        assert b.tau2 == pytest.approx(c * c * a.tau2, rel=1e-5, abs=1e-9)

    @settings(deadline=None)
    @given(meta_inputs, st.sampled_from(["dl", "reml"]), st.randoms(use_true_random=False))
    def test_order_invariance(self, data, method, rnd):
        y, v = data
        idx = list(range(len(y)))
        rnd.shuffle(idx)
        a = random_effect_meta(y, v, method)
        b = random_effect_meta([y[i] for i in idx], [v[i] for i in idx], method)
        assert a.estimate == pytest.approx(b.estimate, abs=1e-9)
        assert a.tau2 == pytest.approx(b.tau2, abs=1e-9)

    @settings(deadline=None)
    @given(meta_inputs)
    def test_zero_tau2_reproduces_fixed(self, data):
        y, v = data
        r = random_effect_meta(y, v, "dl")
        if r.tau2 == 0.0:
            f = fixed_effect_meta(y, v)
            assert (r.estimate, r.se) == (f.estimate, f.se)

    @pytest.mark.slow
    def test_monte_carlo_mean(self):
        base = DGPConfig(alpha1=0.5, beta2=0.4, n=500)
        means = []
        for rep in range(200):
            recs = generate_aggregates(base, 20, seed=rep, tau2=0.01).aggregates
            means.append(random_effect_meta([r.theta_hat for r in recs],
                                            [r.se_theta ** 2 for r in recs], "reml").estimate)
        assert abs(np.mean(means) - 0.2) < 0.01

    def test_wald_interval(self):
        r = random_effect_meta([0.0, 1.0, 0.4], [0.1, 0.1, 0.05])
        assert r.ci_high - r.estimate == pytest.approx(Z975 * r.se)


def mvre_records(o):
    out = []
    for i, rec in enumerate(o["records"]):
        r = rec["r"]
        obs = np.array(rec["observed"])
        sigma = np.array(rec["sigma"]) * np.outer(obs, obs)
        out.append(CorrelationRecord(f"S{i}", rec["n"], r_xy=r[0], r_xm=r[1], r_my=r[2],
                                     sigma=tuple(map(tuple, sigma))))
    return out


class TestMultivariate:
    def test_matches_stacked_oracle(self, frozen):
        o = frozen["mvre"]
        res = multivariate_re_meta(mvre_records(o))
        np.testing.assert_allclose(res.rho_hat, o["rho_hat"], atol=1e-5)
        np.testing.assert_allclose(res.t_hat, o["t_hat"], atol=1e-5)
        np.testing.assert_allclose(res.v, o["v"], atol=1e-7)

    def test_identical_records(self):
        recs = [CorrelationRecord(f"S{i}", 100_000, r_xy=0.3, r_xm=0.5, r_my=0.45)
                for i in range(6)]
        res = multivariate_re_meta(recs)
        np.testing.assert_allclose(res.rho_hat, [0.3, 0.5, 0.45], atol=1e-6)
        assert np.abs(res.t_hat).max() < 1e-6

    def test_single_record_rejected(self):
        with pytest.raises(InsufficientStudiesError):
            multivariate_re_meta([CorrelationRecord("A", 100, r_xy=0.3, r_xm=0.5, r_my=0.45)])

    def test_unobserved_component(self):
        recs = [CorrelationRecord(f"S{i}", 100, r_xm=0.3 + 0.01 * i) for i in range(4)]
        with pytest.raises(UnidentifiedComponentError):
            multivariate_re_meta(recs)

    def test_pattern_counts(self):
        recs = generate_correlation_records(PathModel(0.5, 0.4, 0.1), 10, 500, seed=2, mcar=0.3)
        res = multivariate_re_meta(recs)
        want = {name: sum(getattr(r, name) is not None for r in recs)
                for name in ("r_xy", "r_xm", "r_my")}
        assert res.pattern_counts == want

    def test_recovers_implied_correlations(self):
        truth = implied_correlations(PathModel(0.5, 0.4, 0.1))
        recs = generate_correlation_records(PathModel(0.5, 0.4, 0.1), 30, 1000, seed=4)
        res = multivariate_re_meta(recs)
        np.testing.assert_allclose(res.rho_hat, truth, atol=0.03)

    def test_gradient_matches_finite_differences(self, frozen):
        recs = mvre_records(frozen["mvre"])
        y = np.array([r.vector for r in recs])
        S = np.array([r.sigma for r in recs])
        rng = np.random.default_rng(0)
        for method in ("ml", "reml"):
            lik = MVRELikelihood(y, S, method)
            for log_diag in (False, True):
                theta = rng.normal(0, 0.05, 6) + np.array([0.08, 0, 0.07, 0, 0, 0.06])
                if log_diag:
                    theta[[0, 2, 5]] = np.log(np.abs(theta[[0, 2, 5]]))
                f0, g = lik.objective(theta, log_diag)
                h = 1e-6
                num = [(lik.objective(theta + h * e, log_diag)[0]
                        - lik.objective(theta - h * e, log_diag)[0]) / (2 * h) for e in np.eye(6)]
                np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-5)


class TestOlkinSiotani:
    def test_matches_monte_carlo(self, frozen):
        o = frozen["correlation_sampling_cov"]
        S = olkin_siotani(np.array(o["rho"]), o["n"])
        emp = np.array(o["cov"])
        # first-order formula at n=100 plus MC error of 40000 replicates
        np.testing.assert_allclose(np.diag(S), np.diag(emp), rtol=0.06)
        off = ~np.eye(3, dtype=bool)
        np.testing.assert_allclose(S[off], emp[off], rtol=0.1, atol=2e-4)

    def test_diagonal(self):
        S = olkin_siotani(np.array([0.2, 0.0, -0.5]), 101)
        assert S[0, 0] == pytest.approx((1 - 0.04) ** 2 / 100)
        assert S[1, 1] == pytest.approx(1 / 100)

    def test_independent_variables(self):
        S = olkin_siotani(np.zeros(3), 51)
        np.testing.assert_allclose(S, np.eye(3) / 50)

    @given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
    def test_symmetric(self, a, b, c):
        S = olkin_siotani(np.array([a, b, c]), 100)
        np.testing.assert_allclose(S, S.T)
        assert not math.isnan(S.sum())
