"""Permutation-centered treatment designs L~_i.

With a working weight W~_i that does not depend on treatment,
E^{-1}(W~_i) E{W~_i g(X_i)} collapses to E_p[g(X_i)], so the centered design
is the cluster's basis at its own crossover minus the basis averaged over
the assignment distribution.

Stratified centering uses the plug-in version: the W~-weighted average of the
observed designs of the clusters in the same stratum, premultiplied by the
inverse of the stratum's average weight. Weights are carried at the period
level as P' W~_i P, which is all the estimator sees. The same empirical
offsets are available for marginal centering; with equal cluster sizes the
two constructions coincide.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .design import AssignmentDistribution, TrialLayout, assignment_distribution
from .effectmodel import TreatmentBasis, period_design
from .errors import DesignError
from .working import WorkingCorrelation


def basis_stack(basis: TreatmentBasis, layout: TrialLayout) -> np.ndarray:
    """G[i, s] = T x d basis of cluster i under sequence s; shape N x S x T x d."""
    return np.stack([
        np.stack([period_design(basis, layout, r, i) for r in layout.sequences])
        for i in range(layout.n_clusters)
    ])


@dataclass(frozen=True)
class CenteredDesign:
    basis: TreatmentBasis
    layout: TrialLayout
    mode: str
    groups: np.ndarray = field(repr=False)
    group_dists: tuple[AssignmentDistribution, ...] = field(repr=False)
    strata: tuple | None = None
    diagnostics: tuple[str, ...] = ()
    G: np.ndarray = field(default=None, repr=False)
    # period-level weights P' W~_i P (N x T x T); set for empirical offsets
    weights: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.G is None:
            object.__setattr__(self, "G", basis_stack(self.basis, self.layout))

    @property
    def seq_index(self) -> np.ndarray:
        return self.layout.observed_sequence_index()

    def marginals(self) -> np.ndarray:
        """N x S matrix of per-cluster sequence probabilities."""
        return np.stack([self.group_dists[g].marginal for g in self.groups])

    @property
    def empirical(self) -> bool:
        return self.weights is not None

    def _empirical_offsets(self, keep: np.ndarray) -> np.ndarray:
        Gobs = self.observed_design()
        out = np.zeros_like(Gobs)
        for g in np.unique(self.groups):
            members = self.groups == g
            use = members & keep
            if not use.any():
                continue
            Kbar = self.weights[use].sum(0)
            KG = np.einsum("itu,iud->td", self.weights[use], Gobs[use])
            out[members] = np.linalg.pinv(Kbar, hermitian=True) @ KG
        return out

    def offsets(self, marginals: np.ndarray | None = None) -> np.ndarray:
        """Centering term per cluster; N x T x d."""
        if self.empirical and marginals is None:
            return self._empirical_offsets(np.ones(self.layout.n_clusters, dtype=bool))
        p = self.marginals() if marginals is None else marginals
        out = np.einsum("is,istd->itd", p, self.G)
        # rows shared by every sequence center to exactly zero, not to rounding error
        same = np.all(self.G == self.G[:, :1], axis=1)
        out[same] = self.G[:, 0][same]
        return out

    def loo_offsets(self, drop: int, reduced: bool = True) -> np.ndarray:
        """Centering term after removing cluster ``drop``."""
        if not reduced:
            return self.offsets()
        if self.empirical:
            keep = np.arange(self.layout.n_clusters) != drop
            return self._empirical_offsets(keep)
        return self.offsets(self.loo_marginals(drop, reduced))

    def centered_stack(self) -> np.ndarray:
        """L~_i(r_s) for every cluster and sequence; N x S x T x d."""
        return self.G - self.offsets()[:, None]

    def centered_observed(self) -> np.ndarray:
        """Period-level L~_i at the observed assignment; N x T x d."""
        s = self.seq_index
        return self.G[np.arange(self.layout.n_clusters), s] - self.offsets()

    def observed_design(self) -> np.ndarray:
        s = self.seq_index
        return self.G[np.arange(self.layout.n_clusters), s]

    @property
    def per_cluster(self) -> list[np.ndarray]:
        """Observation-level L~_i, rows replicated by cluster-period size."""
        Lc = self.centered_observed()
        sizes = self.layout.cluster_sizes
        return [np.repeat(Lc[i], sizes[i], axis=0) for i in range(self.layout.n_clusters)]

    def loo_marginals(self, drop: int, reduced: bool = True) -> np.ndarray:
        """Per-cluster marginals after removing cluster ``drop``.

        With ``reduced`` the dropped cluster's group loses one count in its
        sequence, otherwise the full-sample distribution is reused.
        """
        p = self.marginals()
        if not reduced:
            return p
        g = self.groups[drop]
        counts = np.array(self.group_dists[g].counts, dtype=float)
        counts[self.seq_index[drop]] -= 1
        if counts.sum() > 0:
            p[self.groups == g] = counts / counts.sum()
        return p

    def loo_pairwise(self, drop: int, reduced: bool = True) -> list[np.ndarray]:
        out = [d.pairwise for d in self.group_dists]
        if reduced:
            g = self.groups[drop]
            counts = list(self.group_dists[g].counts)
            counts[self.seq_index[drop]] -= 1
            if sum(counts) > 0:
                out[g] = AssignmentDistribution.from_counts(self.layout.sequences, counts).pairwise
        return out


def period_weights(corr: WorkingCorrelation, layout: TrialLayout) -> np.ndarray:
    """P' W~_i P for every cluster; N x T x T."""
    n = layout.cluster_sizes.astype(float)
    return np.stack([corr.period_operator(layout.cluster_sizes[i]) * n[i][None, :]
                     for i in range(layout.n_clusters)])


def center_marginal(basis: TreatmentBasis, layout: TrialLayout,
                    dist: AssignmentDistribution | None = None,
                    corr: WorkingCorrelation | None = None, *,
                    weighting: str = "permutation") -> CenteredDesign:
    """Center against the full permutation distribution.

    The default ``permutation`` weighting uses E_p[g] with each cluster's own
    sizes; treatment-independent weights cancel, so ``corr`` is not needed.
    ``empirical`` replaces it by the W~-weighted average over all clusters and
    requires ``corr``.
    """
    if layout.observed_crossover is None:
        raise DesignError("centering needs observed crossover times")
    dist = assignment_distribution(layout) if dist is None else dist
    if dist.sequences != layout.sequences:
        raise DesignError("distribution sequences do not match the layout")
    notes = ()
    if layout.n_sequences == 1:
        notes = ("single sequence: centered design is identically zero",)
    W = _weights_for(weighting, corr, layout)
    return CenteredDesign(basis, layout, "marginal",
                          np.zeros(layout.n_clusters, dtype=int), (dist,), None, notes,
                          weights=W)


def _weights_for(weighting, corr, layout):
    if weighting == "permutation":
        return None
    if weighting != "empirical":
        raise DesignError(f"unknown centering weighting {weighting!r}")
    if corr is None:
        raise DesignError("empirical centering needs a working correlation")
    return period_weights(corr, layout)


def center_stratified(basis: TreatmentBasis, layout: TrialLayout,
                      corr: WorkingCorrelation | None, strata: Sequence, *,
                      weighting: str = "empirical") -> CenteredDesign:
    """Center within strata of a cluster-level covariate.

    ``empirical`` (default) uses the W~-weighted within-stratum average;
    without ``corr`` independence weights are used, i.e. size-weighted
    averages. ``permutation`` uses the within-stratum allocation as a
    conditional permutation distribution with each cluster's own sizes.
    """
    if layout.observed_crossover is None:
        raise DesignError("centering needs observed crossover times")
    strata = tuple(strata)
    if len(strata) != layout.n_clusters:
        raise DesignError(f"{len(strata)} stratum labels for {layout.n_clusters} clusters")
    levels = sorted(set(strata), key=str)
    groups = np.array([levels.index(k) for k in strata], dtype=int)
    s_obs = layout.observed_sequence_index()
    dists, notes = [], []
    for g, lev in enumerate(levels):
        members = groups == g
        counts = np.bincount(s_obs[members], minlength=layout.n_sequences)
        dists.append(AssignmentDistribution.from_counts(layout.sequences, counts))
        if members.sum() == 1:
            msg = f"stratum {lev!r} has a single cluster and contributes nothing"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
        elif np.count_nonzero(counts) == 1:
            notes.append(f"stratum {lev!r} has one sequence only and contributes nothing")
    if weighting == "empirical" and corr is None:
        corr = WorkingCorrelation("independence", {"sigma2_eps": 1.0})
    W = _weights_for(weighting, corr, layout)
    return CenteredDesign(basis, layout, "stratified", groups, tuple(dists), strata,
                          tuple(notes), weights=W)
