import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from swrobust.design import build_layout
from swrobust.effectmodel import eti_basis, it_basis
from swrobust.errors import DesignError
from swrobust.inference import (confidence_interval, critical_value, loo_influence,
                                variance_permutation)
from swrobust.pipeline import AnalysisConfig, fit_trial
from swrobust.working import WorkingCorrelation, WorkingMeanModel, exchangeable

from conftest import brute_force_variance, fixed_fit, make_data, random_layout


CASES = [
    # (allocation, T, sizes)
    ((1, 1), 3, "equal"),
    ((2, 1), 3, "equal"),
    ((2, 2, 2), 4, "equal"),
    ((2, 1, 2), 4, "random"),
    ((1, 2, 1, 1), 5, "random"),
]


@pytest.mark.parametrize("alloc, T, sizes", CASES)
@pytest.mark.parametrize("kind", ["independence", "exchangeable", "random_intercept_slope"])
def test_variance_matches_enumeration(alloc, T, sizes, kind):
    rng = np.random.default_rng(len(alloc) * 10 + T)
    N = sum(alloc)
    n = np.full((N, T), 2) if sizes == "equal" else rng.integers(1, 4, size=(N, T))
    cross = rng.permutation([r for r, c in zip(range(2, T + 1), alloc) for _ in range(c)])
    lay = build_layout(N, T, range(2, T + 1), alloc, n, cross)
    params = {"sigma2_tau": .4, "sigma2_eta": .1, "sigma2_eps": 1.0}
    corr = WorkingCorrelation(kind, params if kind != "independence" else {"sigma2_eps": 1.0})
    basis = it_basis(T)
    data = make_data(lay, lambda i, j, k, x: rng.normal() + j + 2 * x)

    est = fixed_fit(data, lay, basis, corr=corr)
    v = variance_permutation(est, "plugin")
    V, Vd, Vc, _ = brute_force_variance(data, lay, basis, corr, [est.delta_hat] * N)
    np.testing.assert_allclose(v.v_matrix, V, atol=1e-10)
    np.testing.assert_allclose(v.diagonal, Vd, atol=1e-10)
    np.testing.assert_allclose(v.cross, Vc, atol=1e-10)

    full = variance_permutation(est, "plugin", method="full_enumeration")
    np.testing.assert_allclose(full.v_matrix, brute_force_variance(
        data, lay, basis, corr, [est.delta_hat] * N)[3], atol=1e-10)

    if N > 2:
        loo = variance_permutation(est, "leave_one_out")
        # unidentified leave-one-out fits fall back to the plug-in residual
        deltas = [d if np.all(np.isfinite(d)) else est.delta_hat for d in est.loo_deltas]
        V_loo = brute_force_variance(data, lay, basis, corr, deltas)[0]
        np.testing.assert_allclose(loo.v_matrix, V_loo, atol=1e-10)


def test_eti_variance_matches_enumeration():
    rng = np.random.default_rng(3)
    lay = build_layout(5, 4, (2, 3, 4), (2, 2, 1), np.full((5, 4), 2), (3, 2, 4, 2, 3))
    basis = eti_basis(4)
    corr = exchangeable(0.3)
    data = make_data(lay, lambda i, j, k, x: rng.normal() + x * j)
    est = fixed_fit(data, lay, basis, corr=corr)
    V = brute_force_variance(data, lay, basis, corr, [est.delta_hat] * 5)[0]
    np.testing.assert_allclose(variance_permutation(est).v_matrix, V, atol=1e-10)


def test_equal_size_average_over_slots():
    """At equal sizes the marginal/pairwise form equals averaging over sequence slots."""
    rng = np.random.default_rng(4)
    alloc, T = (2, 2, 2), 4
    N = sum(alloc)
    lay = random_layout(rng, N, T, sizes="equal")
    corr = exchangeable(0.2)
    data = make_data(lay, lambda i, j, k, x: rng.normal())
    est = fixed_fit(data, lay, it_basis(T), corr=corr)
    slots = [s for s, c in enumerate(lay.allocation) for _ in range(c)]
    A = np.einsum("istd,it->isd", est.centered.centered_stack(), est.weighted_residuals)
    diag = sum(np.outer(A[i, k], A[i, k]) for i in range(N) for k in slots) / N
    cross = sum(np.outer(A[i, slots[k]], A[i2, slots[k2]])
                for i, i2 in itertools.permutations(range(N), 2)
                for k, k2 in itertools.permutations(range(N), 2)) / (N * (N - 1))
    Binv = np.linalg.inv(est.bread)
    v = variance_permutation(est)
    np.testing.assert_allclose(v.diagonal, Binv @ diag @ Binv.T, atol=1e-12)
    np.testing.assert_allclose(v.cross, Binv @ cross @ Binv.T, atol=1e-12)


def test_variance_invariant_to_cluster_relabeling():
    rng = np.random.default_rng(5)
    lay = random_layout(rng, 7, 4)
    data = make_data(lay, lambda i, j, k, x: rng.normal() + x)
    corr = exchangeable(0.3)
    v = variance_permutation(fixed_fit(data, lay, it_basis(4), corr=corr)).v_matrix
    order = rng.permutation(7)
    lay2 = build_layout(7, 4, lay.sequences, lay.allocation, lay.cluster_sizes[order],
                        [lay.observed_crossover[i] for i in order])
    data2 = data.select_clusters(order)
    v2 = variance_permutation(fixed_fit(data2, lay2, it_basis(4), corr=corr)).v_matrix
    np.testing.assert_allclose(v, v2, atol=1e-12)
    assert np.allclose(v, v.T)


def test_cross_term_small_under_correct_mean():
    rng = np.random.default_rng(6)
    lay = random_layout(rng, 10, 5, sizes="equal", max_size=4)
    gamma = rng.normal(size=5)
    mean = WorkingMeanModel("categorical_time", "categorical", coefficients=gamma, n_periods=5)
    diag = cross = 0.0
    for _ in range(200):
        a = rng.normal(0, .5, 10)
        data = make_data(lay, lambda i, j, k, x: gamma[j - 1] + a[i] + 2 * x + rng.normal())
        est = fixed_fit(data, lay, it_basis(5), corr=exchangeable(0.2), mean=mean)
        v = variance_permutation(est)
        diag += v.diagonal[0, 0]
        cross += v.cross[0, 0]
    assert abs(cross) < 0.15 * diag


def test_variance_needs_centered_result():
    rng = np.random.default_rng(7)
    lay = random_layout(rng, 5, 3)
    data = make_data(lay, lambda i, j, k, x: rng.normal())
    fit = fit_trial(data, lay, AnalysisConfig(estimator="gee"))
    with pytest.raises(DesignError):
        variance_permutation(fit.estimation)
    est = fixed_fit(data, lay, it_basis(3))
    with pytest.raises(DesignError):
        variance_permutation(est, "jackknife")


def test_loo_deltas_match_reruns():
    rng = np.random.default_rng(8)
    lay = build_layout(4, 3, (2, 3), (2, 2), rng.integers(1, 4, (4, 3)), (2, 3, 3, 2))
    data = make_data(lay, lambda i, j, k, x: rng.normal() + x)
    corr = exchangeable(0.3)
    est = fixed_fit(data, lay, it_basis(3), corr=corr)
    for i in range(4):
        keep = [k for k in range(4) if k != i]
        sub = fixed_fit(data.select_clusters(keep), lay.drop_cluster(i), it_basis(3),
                        corr=corr, leave_one_out=False)
        np.testing.assert_allclose(est.loo_deltas[i], sub.delta_hat, atol=1e-12)


def test_loo_influence_table():
    rng = np.random.default_rng(9)
    lay = random_layout(rng, 8, 4)
    gamma = rng.normal(size=4)
    data = make_data(lay, lambda i, j, k, x: gamma[j - 1] + 4 * x)
    cfg = AnalysisConfig(corr_params={"sigma2_tau": .2, "sigma2_eps": 1.0})
    fit = fit_trial(data, lay, cfg)
    for row in fit.loo_table:
        assert row["deviation"][0] == pytest.approx(0, abs=1e-9)
    assert [r["crossover"] for r in fit.loo_table] == sorted(lay.observed_crossover)

    noisy = data.with_outcome(data.outcome + 0.1 * rng.normal(size=data.n_obs)
                              + 100.0 * (data.cluster == 3) * (data.period == 2))
    table = loo_influence(fit_trial(noisy, lay, cfg).estimation, lay)
    worst = max(table, key=lambda r: abs(r["deviation"][0]))
    assert worst["cluster"] == "3"


def test_reference_interval():
    ci = confidence_interval(-0.0086, np.array([0.0043]))
    assert round(ci.lower[0], 4) == -0.0170
    assert ci.upper[0] == pytest.approx(-0.0001, abs=1e-4)


def test_interval_arithmetic():
    ci = confidence_interval(1.0, np.array([2.0]), level=0.5)
    assert (ci.upper[0] - 1.0) == pytest.approx(0.6745 * 2.0, abs=1e-4)
    assert critical_value(0.95) == pytest.approx(1.959964, abs=1e-6)
    assert critical_value(0.95, "t", 9) == pytest.approx(2.262157, abs=1e-6)
    with pytest.warns(RuntimeWarning, match="zero standard error"):
        ci = confidence_interval(2.0, np.array([0.0]))
    assert ci.lower[0] == ci.upper[0] == 2.0
    ci = confidence_interval(2.0, np.array([np.nan]))
    assert not ci.valid[0] and np.isnan(ci.lower[0])
    with pytest.raises(DesignError):
        critical_value(1.5)
    with pytest.raises(DesignError):
        critical_value(0.9, "t")


@given(st.floats(-10, 10), st.floats(0.001, 5), st.floats(0.5, 0.99))
def test_interval_symmetric(est, se, level):
    ci = confidence_interval(est, np.array([se]), level)
    assert ci.upper[0] - est == pytest.approx(est - ci.lower[0])
    assert ci.lower[0] < est < ci.upper[0]
