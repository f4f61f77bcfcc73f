import numpy as np
import pytest
from hypothesis import given, strategies as st

from swrobust.centering import center_marginal, center_stratified, period_weights
from swrobust.design import build_layout, iter_assignments
from swrobust.effectmodel import eti_basis, it_basis
from swrobust.errors import DesignError
from swrobust.working import WorkingCorrelation, exchangeable

from conftest import random_layout


def test_two_cluster_example():
    lay = build_layout(2, 3, (2, 3), (1, 1), observed_crossover=(2, 3))
    L = center_marginal(it_basis(3), lay).centered_observed()[..., 0]
    np.testing.assert_allclose(L[0], [0, .5, 0])
    np.testing.assert_allclose(L[1], [0, -.5, 0])


def test_two_cluster_example_by_enumeration():
    # average the design of cluster 0 over both assignments
    seqs = (2, 3)
    designs = [np.array([1.0 * (j >= seqs[a[0]]) for j in (1, 2, 3)])
               for a in iter_assignments((1, 1))]
    np.testing.assert_allclose(np.array([0, 1, 1]) - np.mean(designs, 0), [0, .5, 0])


def test_single_sequence_centers_to_zero():
    lay = build_layout(3, 3, (2,), (3,), observed_crossover=(2, 2, 2))
    cd = center_marginal(eti_basis(3), lay)
    assert not cd.centered_observed().any()
    assert cd.diagnostics


@given(st.integers(3, 9), st.integers(3, 6), st.integers(0, 2 ** 31), st.booleans())
def test_marginal_zero_expectation(N, T, seed, eti):
    if N < T - 1:
        N = T - 1
    lay = random_layout(np.random.default_rng(seed), N, T)
    basis = eti_basis(T) if eti else it_basis(T)
    cd = center_marginal(basis, lay)
    P = cd.marginals()
    np.testing.assert_allclose(np.einsum("is,istd->itd", P, cd.centered_stack()), 0, atol=1e-12)


@given(st.integers(3, 9), st.integers(3, 6), st.integers(0, 2 ** 31))
def test_zero_information_rows(N, T, seed):
    if N < T - 1:
        N = T - 1
    lay = random_layout(np.random.default_rng(seed), N, T)
    L = center_marginal(it_basis(T), lay).centered_stack()
    assert not L[:, :, [0, T - 1]].any()
    Le = center_marginal(eti_basis(T), lay).centered_stack()
    assert not Le[:, :, 0].any()
    assert np.abs(Le[:, :, T - 1]).max() > 0


def test_stratified_equals_marginal_when_balanced():
    cross = (2, 3, 4, 2, 3, 4)
    lay = build_layout(6, 4, (2, 3, 4), (2, 2, 2), observed_crossover=cross)
    strata = ["a", "a", "a", "b", "b", "b"]
    basis = it_basis(4)
    m = center_marginal(basis, lay).centered_observed()
    for weighting in ("empirical", "permutation"):
        s = center_stratified(basis, lay, None, strata, weighting=weighting).centered_observed()
        np.testing.assert_allclose(s, m, atol=1e-12)


def test_empirical_marginal_matches_permutation_with_equal_sizes():
    lay = random_layout(np.random.default_rng(1), 8, 5, sizes="equal")
    basis = eti_basis(5)
    corr = exchangeable(0.3)
    a = center_marginal(basis, lay).centered_observed()
    b = center_marginal(basis, lay, corr=corr, weighting="empirical").centered_observed()
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_stratum_with_one_sequence_is_zero():
    cross = (2, 2, 2, 3, 2, 3)
    lay = build_layout(6, 3, (2, 3), (4, 2), observed_crossover=cross)
    strata = ["a", "a", "a", "b", "b", "b"]
    cd = center_stratified(it_basis(3), lay, None, strata)
    L = cd.centered_observed()
    assert not L[:3].any()
    assert np.abs(L[3:]).max() > 0
    assert any("one sequence" in d for d in cd.diagnostics)


def test_single_cluster_stratum_warns():
    lay = build_layout(3, 3, (2, 3), (2, 1), observed_crossover=(2, 3, 2))
    with pytest.warns(RuntimeWarning, match="single cluster"):
        cd = center_stratified(it_basis(3), lay, None, ["a", "a", "b"])
    assert not cd.centered_observed()[2].any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@given(st.integers(0, 2 ** 31), st.sampled_from(["independence", "exchangeable",
                                                 "random_intercept_slope"]))
def test_empirical_weighted_zero_sum(seed, kind):
    rng = np.random.default_rng(seed)
    lay = random_layout(rng, 8, 4)
    params = {"sigma2_tau": .3, "sigma2_eta": .1, "sigma2_eps": 1.0}
    corr = WorkingCorrelation(kind, {k: v for k, v in params.items()
                                     if kind != "independence" or k == "sigma2_eps"})
    strata = list(rng.integers(0, 2, size=8))
    cd = center_stratified(it_basis(4), lay, corr, strata)
    K = period_weights(corr, lay)
    L = cd.centered_observed()
    for g in set(strata):
        idx = [i for i in range(8) if strata[i] == g]
        np.testing.assert_allclose(np.einsum("itu,iud->td", K[idx], L[idx]), 0, atol=1e-10)


def test_sequence_relabeling_equivariance():
    lay = build_layout(4, 4, (2, 3, 4), (2, 1, 1), observed_crossover=(2, 3, 4, 2))
    swapped = lay.with_crossover((4, 3, 2, 2))
    a = center_marginal(it_basis(4), lay).centered_stack()
    b = center_marginal(it_basis(4), swapped).centered_stack()
    np.testing.assert_allclose(a, b)
    np.testing.assert_allclose(center_marginal(it_basis(4), swapped).centered_observed()[0],
                               a[0, 2])


def test_loo_marginals_reduce_counts():
    lay = build_layout(10, 5, (2, 3, 4, 5), (3, 3, 2, 2),
                       observed_crossover=(2, 2, 2, 3, 3, 3, 4, 4, 5, 5))
    cd = center_marginal(it_basis(5), lay)
    np.testing.assert_allclose(cd.loo_marginals(0)[1], [2 / 9, 3 / 9, 2 / 9, 2 / 9])
    np.testing.assert_allclose(cd.loo_marginals(0, reduced=False)[1], [.3, .3, .2, .2])


def test_centering_needs_crossover_and_matching_strata():
    lay = build_layout(2, 3, (2, 3), (1, 1))
    with pytest.raises(DesignError):
        center_marginal(it_basis(3), lay)
    lay = lay.with_crossover((2, 3))
    with pytest.raises(DesignError):
        center_stratified(it_basis(3), lay, None, ["a"])
    with pytest.raises(DesignError):
        center_marginal(it_basis(3), lay, weighting="empirical")
