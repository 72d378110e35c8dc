import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from cemee.estimators import (
    EstimationError,
    EstimatorOptions,
    ee_jacobian,
    ee_value,
    estimating_function_direct,
    estimating_function_indirect,
    fit_direct,
    fit_emee,
    fit_indirect,
    score_rows_for,
)
from cemee.panel import ClusterPanel, build_design
from cemee.simulate import ScenarioConfig, generate_scenario, true_marginal_effect
from cemee.weights import product_joint
from conftest import random_panel

F, Gc = ["intercept", "X"], ["intercept", "Z"]
F_OR, G_OR = ["1", "X"], ["1", "Z"]


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    delta=st.sampled_from([1, 2]),
    policy=st.sampled_from(["otd", "st", "sc", "fixed:0.3"]),
)
def test_estimating_functions_match_literal_sums(seed, delta, policy):
    rng = np.random.default_rng(seed)
    sizes = rng.integers(1, 4, size=rng.integers(2, 4))
    sizes[0] = max(sizes[0], 2)
    panel = random_panel(rng, sizes=sizes, T=int(rng.integers(delta + 1, 6)))
    theta = rng.normal(0, 0.4, 4)
    design = build_design(panel, F, Gc, delta)
    for est in ("cemee", "emee"):
        value, U = estimating_function_direct(design, theta, EstimatorOptions(estimator=est, delta=delta, policy=policy), panel)
        ref, U_ref = oracle.direct_value(panel, theta, F_OR, G_OR, delta, policy, emee=est == "emee")
        np.testing.assert_allclose(value, ref, rtol=0, atol=1e-12)
        np.testing.assert_allclose(U, U_ref, rtol=0, atol=1e-12)
    value, U = estimating_function_indirect(design, theta, EstimatorOptions(delta=delta, policy=policy), panel)
    ref, U_ref = oracle.indirect_value(panel, theta, F_OR, G_OR, delta, policy)
    np.testing.assert_allclose(value, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(U, U_ref, rtol=0, atol=1e-12)


@pytest.mark.parametrize("estimator", ["cemee", "emee", "indirect"])
def test_jacobian_matches_finite_differences(estimator, rng):
    panel = random_panel(rng, M=4, G=3, T=10)
    design = build_design(panel, F, Gc, 1)
    rows = score_rows_for(design, EstimatorOptions(estimator=estimator), panel)
    theta = rng.normal(0, 0.3, 4)
    J = ee_jacobian(rows, theta)
    h = 1e-6
    fd = np.column_stack([(ee_value(rows, theta + h * e) - ee_value(rows, theta - h * e)) / (2 * h) for e in np.eye(4)])
    assert np.max(np.abs(J - fd)) <= 1e-5 * np.max(np.abs(J))


def test_equal_cluster_sizes_give_identical_points(rng):
    panel = random_panel(rng, M=6, G=4, T=15)
    a = fit_direct(panel, F, Gc)
    b = fit_emee(panel, F, Gc)
    assert np.max(np.abs(a.beta - b.beta)) < 1e-10
    assert a.n_units == 6 and b.n_units == 24


def test_unequal_cluster_sizes_differ(rng):
    panel = random_panel(rng, sizes=[1, 2, 6, 3, 5], T=15)
    a = fit_direct(panel, F, Gc)
    b = fit_emee(panel, F, Gc)
    assert np.max(np.abs(a.beta - b.beta)) > 1e-6


def test_singleton_clusters_reduce_to_emee(rng):
    panel = random_panel(rng, sizes=[1] * 12, T=12)
    a = fit_direct(panel, F, Gc)
    b = fit_emee(panel, F, Gc)
    np.testing.assert_allclose(a.theta, b.theta, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.scores, b.scores, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.bread, b.bread, rtol=0, atol=1e-12)


def test_fit_solves_estimating_equation(rng):
    panel = random_panel(rng, M=5, G=3, T=12)
    for fit in (fit_direct, fit_emee, fit_indirect):
        res = fit(panel, F, Gc)
        assert res.converged
        assert np.max(np.abs(ee_value(res.rows, res.theta))) <= 1e-10
        assert res.to_dict()["n_units"] == res.n_units


def _relabel(panel, mapping):
    return ClusterPanel.from_arrays(
        [mapping[c] for c in panel.cluster.tolist()],
        panel.user,
        panel.t,
        panel.A,
        panel.prob,
        panel.Y,
        avail=panel.avail,
        states=panel.states,
    )


def test_invariant_to_cluster_relabeling(rng):
    panel = random_panel(rng, sizes=[2, 3, 4, 2], T=10)
    ids = sorted(set(panel.cluster.tolist()))
    relabeled = _relabel(panel, dict(zip(ids, ids[::-1])))
    for fit in (fit_direct, fit_indirect):
        np.testing.assert_allclose(fit(panel, F, Gc).beta, fit(relabeled, F, Gc).beta, rtol=0, atol=1e-12)


def test_beta_invariant_to_control_reparameterization(rng):
    panel = random_panel(rng, M=5, G=3, T=12)
    a = fit_direct(panel, F, ["intercept", "Z"])
    b = fit_direct(panel, F, ["Z*2", "intercept"])
    np.testing.assert_allclose(a.beta, b.beta, rtol=0, atol=1e-9)


def test_product_joint_table_matches_default(rng):
    panel = random_panel(rng, M=4, G=3, T=10)
    pt = float(panel.A[panel.avail == 1].mean())
    a = fit_indirect(panel, F, Gc)
    b = fit_indirect(panel, F, Gc, numerator={"value": pt, "joint": product_joint(pt)})
    np.testing.assert_allclose(a.theta, b.theta, rtol=0, atol=1e-12)


def test_indirect_skips_singletons(rng, caplog):
    panel = random_panel(rng, sizes=[1, 3, 1, 2], T=8)
    res = fit_indirect(panel, F, Gc)
    assert res.rows.skipped_clusters == 2
    assert res.n_units == 2
    assert "skipped 2" in caplog.text


def test_no_eligible_pairs(rng):
    panel = random_panel(rng, sizes=[1, 1, 1], T=8)
    with pytest.raises(EstimationError, match="no eligible pairs"):
        fit_indirect(panel, F, Gc)


def test_zero_outcome_mass_in_arm(rng):
    panel = random_panel(rng, M=3, G=2, T=8)
    Y = np.where(panel.A == 1, 0, panel.Y)
    flat = ClusterPanel.from_arrays(panel.cluster, panel.user, panel.t, panel.A, panel.prob, Y, panel.avail, panel.states)
    with pytest.raises(EstimationError, match="zero weighted outcome mass"):
        fit_direct(flat, ["intercept"], ["intercept"])


def test_singular_jacobian(rng):
    panel = random_panel(rng, M=3, G=2, T=8)
    with pytest.raises(EstimationError, match="singular"):
        fit_direct(panel, ["intercept", "intercept"], ["intercept"])


def test_non_convergence_reported(rng):
    panel = random_panel(rng, M=3, G=2, T=8)
    with pytest.raises(EstimationError, match="did not converge"):
        fit_direct(panel, F, Gc, max_iter=1)


def test_overflow_names_row(rng):
    panel = random_panel(rng, M=2, G=2, T=4)
    rows = score_rows_for(build_design(panel, F, Gc), EstimatorOptions(), panel)
    with pytest.raises(EstimationError, match="row"):
        ee_value(rows, np.array([800.0, 0, 0, 0]))


def test_contributions_blocks(rng):
    panel = random_panel(rng, sizes=[2, 3], T=20)
    res = fit_indirect(panel, ["intercept"], ["intercept"])
    contribs = res.contributions()
    assert [len(c.blocks) for c in contribs] == [2, 6]
    np.testing.assert_allclose(sum(c.U for c in contribs), res.scores.sum(axis=0))


def test_recovers_scenario_truth():
    cfg = ScenarioConfig("I", M=100, G=10, seed=3)
    res = fit_direct(generate_scenario(cfg), ["intercept"], ["intercept", "Z"])
    assert abs(res.beta[0] - true_marginal_effect(cfg)) < 0.06


def test_lag_fit_runs_for_each_policy():
    panel = generate_scenario(ScenarioConfig("LAG-II", M=20, G=5, seed=1))
    betas = {p: fit_direct(panel, ["intercept"], ["intercept", "Z"], delta=2, policy=p).beta[0] for p in ("otd", "st")}
    assert betas["otd"] != betas["st"]
    assert all(np.isfinite(b) for b in betas.values())


def test_options_validation():
    with pytest.raises(ValueError):
        EstimatorOptions(estimator="ols")
    with pytest.raises(ValueError):
        EstimatorOptions(delta=0)
    assert EstimatorOptions(estimator="cemee-indirect").estimator == "indirect"
