"""Permutation-based variance of the centered estimator and confidence intervals.

The variance holds the residuals Y_i - g(X_i) delta - m~_i fixed and takes
the expectation of the estimating-function outer product over the
assignment distribution. Same-cluster terms need only marginal sequence
probabilities, distinct-cluster terms only pairwise ones.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .design import iter_assignments, n_assignments
from .errors import DesignError, NumericalError
from .estimator import EstimationResult


@dataclass(frozen=True)
class VarianceEstimate:
    v_matrix: np.ndarray
    mode: str
    diagonal: np.ndarray
    cross: np.ndarray
    method: str = "bread_fixed"
    se: np.ndarray = field(default=None)
    diagnostics: tuple[str, ...] = ()

    @property
    def cross_term_share(self) -> np.ndarray:
        """Cross term as a fraction of the total, per component."""
        tot = np.diag(self.v_matrix)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(tot != 0, np.diag(self.cross) / tot, np.nan)


def _finish(v_diag, v_cross, mode, method, notes) -> VarianceEstimate:
    v = v_diag + v_cross
    v = (v + v.T) / 2
    tot = np.diag(v).copy()
    se = np.sqrt(np.clip(tot, 0, None))
    for k in np.flatnonzero(~(tot > 0)):
        fallback = v_diag[k, k]
        if np.isfinite(tot[k]) and fallback > 0:
            notes.append(f"component {k}: cross term makes the variance nonpositive "
                         f"({tot[k]:.3g}); reporting the same-cluster term only")
            se[k] = np.sqrt(fallback)
    return VarianceEstimate(v, mode, v_diag, v_cross, method, se, tuple(notes))


def _weighted_residuals(result: EstimationResult, mode: str, notes: list[str]) -> np.ndarray:
    if mode == "plugin":
        return result.weighted_residuals
    if mode != "leave_one_out":
        raise DesignError(f"unknown variance mode {mode!r}")
    z = result.weighted_residuals_loo.copy()
    bad = ~np.all(np.isfinite(z), axis=1)
    if bad.any():
        notes.append(f"{bad.sum()} cluster(s) without a leave-one-out estimate use "
                     "plug-in residuals")
        z[bad] = result.weighted_residuals[bad]
    return z


def variance_permutation(result: EstimationResult, mode: str = "plugin", *,
                         method: str = "bread_fixed",
                         max_assignments: int = 100_000) -> VarianceEstimate:
    """Permutation variance of delta~ with its same-cluster and cross terms.

    ``bread_fixed`` keeps the bread at the observed assignment and evaluates
    the core exactly from marginal and pairwise probabilities.
    ``full_enumeration`` averages the whole sandwich, bread included, over
    every admissible assignment.
    """
    cd = result.centered
    if cd is None or result.weighted_residuals is None:
        raise DesignError("variance_permutation needs a centered-estimator result")
    notes: list[str] = []
    z = _weighted_residuals(result, mode, notes)
    Lstack = cd.centered_stack()                      # N x S x T x d
    A = np.einsum("istd,it->isd", Lstack, z)          # estimating-function pieces

    if method == "full_enumeration":
        return _full_enumeration(result, A, Lstack, mode, notes, max_assignments)
    if method != "bread_fixed":
        raise DesignError(f"unknown variance method {method!r}")

    Binv = np.linalg.inv(result.bread)
    P = cd.marginals()
    d = A.shape[2]
    diag = np.einsum("is,isd,ise->de", P, A, A)
    cross = np.zeros((d, d))
    V = []
    for g, dist in enumerate(cd.group_dists):
        members = cd.groups == g
        Ag = A[members]
        q = dist.pairwise
        U = Ag.sum(0)                                 # S x d
        cross += U.T @ q @ U - np.einsum("st,isd,ite->de", q, Ag, Ag)
        V.append(dist.marginal @ U)
    V = np.array(V)
    tot = V.sum(0)
    cross += np.outer(tot, tot) - V.T @ V
    return _finish(Binv @ diag @ Binv.T, Binv @ cross @ Binv.T, mode, "bread_fixed", notes)


def _group_assignments(cd, max_assignments):
    per_group = []
    total = 1
    for g, dist in enumerate(cd.group_dists):
        members = np.flatnonzero(cd.groups == g)
        total *= n_assignments(dist.counts)
        if total > max_assignments:
            raise NumericalError(
                f"full enumeration needs more than {max_assignments} assignments"
            )
        per_group.append((members, list(iter_assignments(dist.counts))))
    N = len(cd.groups)
    out = []
    for combo in itertools.product(*(labs for _, labs in per_group)):
        a = np.empty(N, dtype=int)
        for (members, _), lab in zip(per_group, combo):
            a[members] = lab
        out.append(a)
    return np.array(out)


def _full_enumeration(result, A, Lstack, mode, notes, max_assignments):
    cd = result.centered
    assign = _group_assignments(cd, max_assignments)   # M x N
    idx = np.arange(assign.shape[1])
    KG = np.einsum("itu,isud->istd", result.K, cd.G)
    Bc = np.einsum("istd,iste->isde", Lstack, KG)      # N x S x d x d
    B = Bc[idx, assign].sum(1)                          # M x d x d
    a = A[idx, assign]                                  # M x N x d
    Binv = np.linalg.inv(B)
    diag_core = np.einsum("mid,mie->mde", a, a)
    s = a.sum(1)
    cross_core = np.einsum("md,me->mde", s, s) - diag_core
    v_diag = np.einsum("mde,mef,mgf->mdg", Binv, diag_core, Binv).mean(0)
    v_cross = np.einsum("mde,mef,mgf->mdg", Binv, cross_core, Binv).mean(0)
    return _finish(v_diag, v_cross, mode, "full_enumeration", notes)


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: np.ndarray
    upper: np.ndarray
    level: float
    valid: np.ndarray
    diagnostics: tuple[str, ...] = ()

    def as_pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.lower.tolist(), self.upper.tolist()))


def critical_value(level: float, quantile: str = "normal", df: int | None = None) -> float:
    if not 0 < level < 1:
        raise DesignError(f"confidence level must lie in (0, 1), got {level}")
    if quantile == "normal":
        return float(stats.norm.ppf(0.5 + level / 2))
    if quantile == "t":
        if df is None or df < 1:
            raise DesignError("t quantiles need positive degrees of freedom")
        return float(stats.t.ppf(0.5 + level / 2, df))
    raise DesignError(f"unknown quantile {quantile!r}")


def confidence_interval(delta_hat, v, level: float = 0.95, quantile: str = "normal",
                        df: int | None = None) -> ConfidenceInterval:
    """delta_k +/- c * SE_k; ``v`` is a VarianceEstimate or an array of SEs."""
    est = np.atleast_1d(np.asarray(delta_hat, dtype=float))
    se = np.atleast_1d(np.asarray(v.se if isinstance(v, VarianceEstimate) else v, dtype=float))
    c = critical_value(level, quantile, df)
    notes = []
    valid = np.isfinite(se) & (se >= 0)
    if np.any(se == 0):
        msg = "zero standard error: interval collapses to the point estimate"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    if not valid.all():
        notes.append("nonpositive or undefined variance: interval marked invalid")
    half = np.where(valid, c * se, np.nan)
    return ConfidenceInterval(est - half, est + half, level, valid, tuple(notes))


def loo_influence(result: EstimationResult, layout, cluster_ids=None) -> list[dict]:
    """Leave-one-out estimates ordered by crossover time, as plot-ready rows."""
    ids = cluster_ids if cluster_ids is not None else [str(i) for i in range(layout.n_clusters)]
    rows = []
    for i in range(layout.n_clusters):
        dev = result.loo_deltas[i] - result.delta_hat
        rows.append({
            "cluster": ids[i],
            "crossover": int(layout.observed_crossover[i]),
            "baseline_size": int(layout.cluster_sizes[i, 0]),
            "size": int(layout.cluster_sizes[i].sum()),
            "delta_loo": result.loo_deltas[i].tolist(),
            "deviation": dev.tolist(),
        })
    rows.sort(key=lambda r: (r["crossover"], r["cluster"]))
    return rows
