import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize, stats

from cemee.estimators import fit_direct, fit_emee, fit_indirect, residual_gradient, residuals
from cemee.panel import ClusterPanel
from cemee.simulate import ScenarioConfig, generate_scenario
from cemee.variance import (
    InferenceError,
    _estimate,
    contrast_se,
    corrected_scores,
    covariance,
    curve_frame,
    infer,
    leverage_block,
    meat_matrix,
    moderation_curve,
    sandwich,
    small_sample_correct,
    t_critical,
)
from conftest import random_panel

F, Gc = ["intercept", "X"], ["intercept", "Z"]


def test_meat_is_average_outer_product(rng):
    panel = random_panel(rng, M=2, G=3, T=12)
    res = fit_direct(panel, ["intercept"], ["intercept"])
    U = res.scores
    by_hand = sum(np.outer(u, u) for u in U) / len(U)
    np.testing.assert_allclose(meat_matrix(U), by_hand, rtol=0, atol=1e-14)


def test_sandwich_formula(rng):
    res = fit_direct(random_panel(rng, M=6, G=3, T=10), F, Gc)
    cov = sandwich(res)
    Q = np.linalg.inv(res.bread)
    ref = Q @ meat_matrix(res.scores) @ Q.T / res.n_units
    np.testing.assert_allclose(cov.cov, ref, rtol=1e-10, atol=1e-14)
    assert np.allclose(cov.cov, cov.cov.T, atol=1e-12)
    assert np.all(np.diag(cov.cov) >= 0)
    assert cov.df == 6 - 4


def test_singleton_clusters_sandwich_equals_emee(rng):
    panel = random_panel(rng, sizes=[1] * 15, T=10)
    a, b = fit_direct(panel, F, Gc), fit_emee(panel, F, Gc)
    for fn in (sandwich, small_sample_correct):
        np.testing.assert_allclose(fn(a).cov, fn(b).cov, rtol=0, atol=1e-12)


def test_leverage_hand_inverse_two_decisions(rng):
    panel = random_panel(rng, sizes=[1] * 40, T=2, y_rate=(0.3, 0.6))
    res = fit_direct(panel, ["intercept"], ["intercept"])
    d = residual_gradient(res.rows, res.theta)
    r = residuals(res.rows, res.theta)
    ch = res.rows.ch
    B = ch.T @ d
    U = []
    for block in range(40):
        lo = 2 * block
        H = d[lo : lo + 2] @ np.linalg.inv(B) @ ch[lo : lo + 2].T
        np.testing.assert_allclose(leverage_block(res, block), H, rtol=1e-12, atol=1e-15)
        a, b_, c, e = 1 - H[0, 0], -H[0, 1], -H[1, 0], 1 - H[1, 1]
        inv = np.array([[e, -b_], [-c, a]]) / (a * e - b_ * c)
        U.append(ch[lo : lo + 2].T @ (inv @ r[lo : lo + 2]))
    np.testing.assert_allclose(corrected_scores(res), np.array(U), rtol=0, atol=1e-13)


@pytest.mark.parametrize("fit", [fit_direct, fit_emee, fit_indirect])
def test_woodbury_matches_direct_inverse(fit, rng):
    res = fit(random_panel(rng, sizes=[2, 3, 4, 3, 2], T=8), ["intercept"], Gc)
    np.testing.assert_allclose(corrected_scores(res, "woodbury"), corrected_scores(res, "direct"), rtol=1e-9, atol=1e-13)


def test_correction_inflates_standard_errors():
    inflated = 0
    total = 0
    for seed in range(100):
        panel = random_panel(np.random.default_rng(seed), M=8, G=3, T=10)
        try:
            res = fit_direct(panel, ["intercept"], ["intercept", "Z"])
        except Exception:
            continue
        total += 1
        inflated += small_sample_correct(res).beta_se[0] >= sandwich(res).beta_se[0]
    assert total >= 90
    assert inflated / total >= 0.9, f"corrected SE smaller in {total - inflated} of {total} panels"


def test_correction_vanishes_for_many_clusters():
    res = fit_direct(generate_scenario(ScenarioConfig("I", M=500, G=2, T=30, seed=2)), ["intercept"], ["intercept", "Z"])
    ratio = small_sample_correct(res).beta_se[0] / sandwich(res).beta_se[0]
    assert ratio == pytest.approx(1.0, abs=0.02)


def test_auto_correction_threshold():
    small = fit_direct(generate_scenario(ScenarioConfig("I", M=49, G=2, seed=1)), ["intercept"], ["intercept"])
    large = fit_direct(generate_scenario(ScenarioConfig("I", M=50, G=2, seed=1)), ["intercept"], ["intercept"])
    assert covariance(small).corrected and not covariance(large).corrected
    assert not covariance(small, small_sample=False).corrected


def _t_quantile_by_integration(df, prob):
    pdf = lambda x: stats.t.pdf(x, df)
    cdf = lambda x: 0.5 + integrate.quad(pdf, 0, x, epsabs=1e-14, epsrel=1e-14)[0]
    return optimize.brentq(lambda x: cdf(x) - prob, 0, 50, xtol=1e-14)


def test_t_critical_values():
    assert t_critical(10, 0.05) == pytest.approx(2.228139, abs=1e-5)
    assert t_critical(10, 0.05) == pytest.approx(_t_quantile_by_integration(10, 0.975), abs=1e-9)
    assert t_critical(1e8, 0.05) == pytest.approx(1.959964, abs=1e-4)
    with pytest.raises(InferenceError):
        t_critical(0, 0.05)
    with pytest.raises(InferenceError):
        t_critical(10, 1.0)


def test_case_study_scale_effect_significant():
    est = _estimate("b0", -0.058, 0.006, t_critical(100), 100)
    assert est.p < 0.05
    assert est.upper < 0


@given(st.floats(-5, 5), st.floats(0, 3), st.integers(1, 500))
def test_interval_contains_estimate(value, se, df):
    est = _estimate("b", value, se, t_critical(df), df)
    assert est.lower <= value <= est.upper
    assert 0 <= est.p <= 1


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3))
def test_contrast_quadratic_form(c0, c1):
    res = _MOD_FIT
    cov = covariance(res)
    c = np.array([c0, c1])
    assert contrast_se(cov, c) ** 2 == pytest.approx(c @ cov.beta_cov @ c, rel=1e-12, abs=1e-14)


_MOD_FIT = fit_direct(generate_scenario(ScenarioConfig("I", M=60, G=5, seed=9)), ["intercept", "Z"], ["intercept", "Z"])


def test_moderation_curve():
    res = _MOD_FIT
    cov = covariance(res)
    curve = moderation_curve(res, cov, [0, 0.5, 1])
    crit = t_critical(cov.df)
    V = cov.beta_cov
    assert curve[0].effect == res.beta[0]
    for pt in curve:
        width = 2 * crit * np.sqrt(V[0, 0] + pt.s**2 * V[1, 1] + 2 * pt.s * V[0, 1])
        assert pt.upper - pt.lower == pytest.approx(width, rel=1e-12)
    assert abs(curve[2].effect - 0.4) < 3 * curve[2].se
    assert list(curve_frame(curve).columns) == ["s", "effect", "se", "lower", "upper"]
    with pytest.raises(InferenceError):
        moderation_curve(fit_direct(generate_scenario(ScenarioConfig("I", M=10, G=2)), ["intercept"], ["intercept"]), None, [0])


def test_covariance_invariant_to_cluster_relabeling(rng):
    panel = random_panel(rng, sizes=[2, 3, 4, 2, 3], T=10)
    ids = sorted(set(panel.cluster.tolist()))
    mapping = dict(zip(ids, ids[::-1]))
    relabeled = ClusterPanel.from_arrays(
        [mapping[c] for c in panel.cluster.tolist()], panel.user, panel.t, panel.A, panel.prob, panel.Y, panel.avail, panel.states
    )
    for fit in (fit_direct, fit_indirect):
        a, b = fit(panel, ["intercept"], Gc), fit(relabeled, ["intercept"], Gc)
        np.testing.assert_allclose(covariance(a).cov, covariance(b).cov, rtol=1e-10, atol=1e-15)


def test_inference_outputs(tmp_path, rng):
    res = fit_direct(random_panel(rng, M=6, G=3, T=12), F, Gc)
    summary = infer(res, contrasts=[[1.0, 1.0]])
    frame = summary.to_frame()
    assert list(frame.columns) == ["coefficient", "estimate", "se", "t", "p", "lo", "hi"]
    assert len(frame) == 3
    summary.write_json(tmp_path / "s.json")
    summary.write_csv(tmp_path / "s.csv")
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["df"] == 2 and data["small_sample_corrected"]
