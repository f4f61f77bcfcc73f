"""Closed-form centered estimator, the uncentered GEE comparator and the
post-stratification formulas it is compared against.

All cluster-level algebra is carried out on period sums: with the supported
working covariances ``P' W v = Pi (P' v)``, and every treatment and mean
column is constant within cluster-period.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .centering import CenteredDesign
from .data import LongFormatDataset
from .design import TrialLayout
from .effectmodel import TreatmentBasis
from .errors import DesignError, IdentificationError, NumericalError
from .working import (WorkingCorrelation, WorkingMeanModel, mean_regressors,
                      observation_design)

COND_LIMIT = 1e10


def period_sums(values: np.ndarray, data: LongFormatDataset, n_periods: int) -> np.ndarray:
    """N x T matrix of within-cluster-period sums of a per-observation vector."""
    out = np.zeros((data.n_clusters, n_periods) + np.shape(values)[1:])
    np.add.at(out, (data.cluster, data.period - 1), values)
    return out


def period_operators(corr: WorkingCorrelation, layout: TrialLayout) -> np.ndarray:
    return np.stack([corr.period_operator(layout.cluster_sizes[i])
                     for i in range(layout.n_clusters)])


@dataclass(frozen=True)
class EstimationResult:
    delta_hat: np.ndarray
    bread: np.ndarray
    residuals: list[np.ndarray] = field(repr=False)
    loo_deltas: np.ndarray = field(repr=False)
    meta: dict[str, Any] = field(default_factory=dict)
    column_names: tuple[str, ...] = ()
    # P' W (Y - g delta - m) per cluster at the plug-in and leave-one-out deltas
    weighted_residuals: np.ndarray | None = field(default=None, repr=False)
    weighted_residuals_loo: np.ndarray | None = field(default=None, repr=False)
    centered: CenteredDesign | None = field(default=None, repr=False)
    K: np.ndarray | None = field(default=None, repr=False)
    h: np.ndarray | None = field(default=None, repr=False)
    diagnostics: tuple[str, ...] = ()


def check_bread(B: np.ndarray, names: Sequence[str], Lc: np.ndarray | None = None) -> None:
    if np.all(np.isfinite(B)):
        cond = np.linalg.cond(B) if B.size else np.inf
    else:
        cond = np.inf
    if cond < COND_LIMIT:
        return
    bad: list[str] = []
    if Lc is not None:
        bad = [names[k] for k in range(len(names)) if not np.any(np.abs(Lc[..., k]) > 1e-12)]
    if not bad:
        _, _, vt = np.linalg.svd(B)
        null = vt[-1]
        bad = [names[k] for k in np.flatnonzero(np.abs(null) > 1e-6)]
    raise IdentificationError(
        f"treatment-effect columns not identified (condition number {cond:.3g}): {', '.join(bad)}"
    )


def _solve_centered(Lc, KG, h, mask=None):
    if mask is not None:
        Lc, KG, h = Lc[mask], KG[mask], h[mask]
    B = np.einsum("itd,ite->de", Lc, KG)
    u = np.einsum("itd,it->d", Lc, h)
    return B, u


def estimate(data: LongFormatDataset, layout: TrialLayout, basis: TreatmentBasis,
             working_mean: WorkingMeanModel, working_corr: WorkingCorrelation,
             centered: CenteredDesign, *, leave_one_out: bool = True,
             loo_distribution: str = "reduced") -> EstimationResult:
    """Closed-form solve of the centered estimating equation."""
    T = layout.n_periods
    Pi = period_operators(working_corr, layout)
    n = layout.cluster_sizes.astype(float)
    K = Pi * n[:, None, :]
    m = working_mean.values(data)
    h = np.einsum("itu,iu->it", Pi, period_sums(data.outcome - m, data, T))
    Gobs = centered.observed_design()
    Lc = centered.centered_observed()

    KG = np.einsum("itu,iud->itd", K, Gobs)
    B, u = _solve_centered(Lc, KG, h)
    check_bread(B, basis.column_names, Lc)
    delta = np.linalg.solve(B, u)
    z = h - KG @ delta

    g = observation_design(basis, layout, data)
    resid = data.outcome - g @ delta - m
    bnd = data.cluster_bounds()
    residuals = [resid[bnd[i]:bnd[i + 1]] for i in range(layout.n_clusters)]

    N, d = layout.n_clusters, basis.dim
    loo = np.full((N, d), np.nan)
    notes = list(centered.diagnostics)
    if leave_one_out:
        reduced = loo_distribution == "reduced"
        if loo_distribution not in ("reduced", "full"):
            raise DesignError(f"unknown leave-one-out distribution {loo_distribution!r}")
        for i in range(N):
            mask = np.arange(N) != i
            Lc_i = Gobs - centered.loo_offsets(i, reduced)
            Bi, ui = _solve_centered(Lc_i, KG, h, mask)
            try:
                check_bread(Bi, basis.column_names)
                loo[i] = np.linalg.solve(Bi, ui)
            except (IdentificationError, np.linalg.LinAlgError):
                notes.append(f"leave-one-out estimate without cluster {data.cluster_ids[i]} "
                             "is not identified")
    z_loo = h - np.einsum("itd,id->it", KG, loo)

    meta = {
        "estimator": "centered",
        "centering": centered.mode,
        "working_mean": working_mean.kind,
        "working_mean_terms": working_mean.column_names,
        "working_mean_coefficients": np.asarray(working_mean.coefficients).tolist(),
        "working_corr": working_corr.kind,
        "working_corr_params": dict(working_corr.params),
        "loo_distribution": loo_distribution,
    }
    return EstimationResult(delta, B, residuals, loo, meta, basis.column_names, z, z_loo,
                            centered, K, h, tuple(notes) + working_corr.diagnostics)


def estimate_gee_comparator(data: LongFormatDataset, layout: TrialLayout,
                            basis: TreatmentBasis, working_mean: WorkingMeanModel,
                            working_corr: WorkingCorrelation, *,
                            leave_one_out: bool = True) -> EstimationResult:
    """Uncentered GEE: joint GLS of Y on [g(X), working-mean regressors].

    Only consistent when the working mean is correctly specified.
    """
    T = layout.n_periods
    if T < 2:
        raise DesignError("a single period carries no treatment contrast")
    g = observation_design(basis, layout, data)
    if working_mean.kind == "zero":
        D = g
        mean_names: tuple[str, ...] = ()
    else:
        X, mean_names = mean_regressors(working_mean.time, working_mean.covariates, data, T)
        D = np.column_stack([g, X])
    p = D.shape[1]
    bnd = data.cluster_bounds()
    PD = period_sums(D, data, T)
    PY = period_sums(data.outcome, data, T)
    A = np.zeros((layout.n_clusters, p, p))
    b = np.zeros((layout.n_clusters, p))
    for i in range(layout.n_clusters):
        s2, Zp, C = working_corr.woodbury(layout.cluster_sizes[i])
        Di, yi = D[bnd[i]:bnd[i + 1]], data.outcome[bnd[i]:bnd[i + 1]]
        A[i] = Di.T @ Di
        b[i] = Di.T @ yi
        if Zp.shape[1]:
            ZD = Zp.T @ PD[i]
            Zy = Zp.T @ PY[i]
            A[i] -= ZD.T @ C @ ZD
            b[i] -= ZD.T @ C @ Zy
        A[i] /= s2
        b[i] /= s2
    At, bt = A.sum(0), b.sum(0)
    names = basis.column_names + mean_names
    if np.linalg.cond(At) > COND_LIMIT:
        raise IdentificationError(f"GEE normal equations are singular in columns {names}")
    beta = np.linalg.solve(At, bt)
    d = basis.dim
    delta = beta[:d]
    resid = data.outcome - D @ beta
    residuals = [resid[bnd[i]:bnd[i + 1]] for i in range(layout.n_clusters)]
    loo = np.full((layout.n_clusters, d), np.nan)
    if leave_one_out:
        for i in range(layout.n_clusters):
            Ai = At - A[i]
            if np.linalg.cond(Ai) < COND_LIMIT:
                loo[i] = np.linalg.solve(Ai, bt - b[i])[:d]
    # information for delta after profiling out the mean coefficients
    Agg, Agm, Amm = At[:d, :d], At[:d, d:], At[d:, d:]
    bread = Agg - Agm @ np.linalg.solve(Amm, Agm.T) if p > d else Agg
    meta = {
        "estimator": "gee_comparator",
        "working_mean": working_mean.kind,
        "working_mean_terms": mean_names,
        "working_mean_coefficients": beta[d:].tolist(),
        "working_corr": working_corr.kind,
        "working_corr_params": dict(working_corr.params),
    }
    return EstimationResult(delta, bread, residuals, loo, meta, basis.column_names,
                            diagnostics=working_corr.diagnostics)


# --------------------------------------------------------------------------
# Post-stratification at a single period
# --------------------------------------------------------------------------

def poststrat_weights(strata_counts, treated_counts) -> np.ndarray:
    """Normalized n_k (w1/n_k)(w0/n_k) weights of the stratified centered estimator."""
    n = np.asarray(strata_counts, dtype=float)
    w1 = np.asarray(treated_counts, dtype=float)
    if n.shape != w1.shape or np.any(w1 < 0) or np.any(w1 > n) or np.any(n <= 0):
        raise DesignError("inconsistent stratum counts")
    w0 = n - w1
    raw = n * (w1 / n) * (w0 / n)
    if raw.sum() <= 0:
        raise NumericalError("every stratum has only treated or only control clusters")
    return raw / raw.sum()


def _stratum_contrasts(cluster_means, treated, strata):
    y = np.asarray(cluster_means, dtype=float)
    a = np.asarray(treated).astype(int)
    strata = list(strata)
    if not (len(y) == len(a) == len(strata)):
        raise DesignError("cluster means, treatment and strata differ in length")
    levels = sorted(set(strata), key=str)
    lab = np.array([levels.index(s) for s in strata])
    n = np.array([np.sum(lab == k) for k in range(len(levels))], dtype=float)
    w1 = np.array([np.sum(a[lab == k]) for k in range(len(levels))], dtype=float)
    diff = np.full(len(levels), np.nan)
    for k in range(len(levels)):
        sel = lab == k
        if 0 < w1[k] < n[k]:
            diff[k] = y[sel & (a == 1)].mean() - y[sel & (a == 0)].mean()
    return levels, n, w1, diff


def estimate_post_stratified(cluster_means, treated, strata) -> float:
    """Post-stratification estimator with stratum-size weights n_k / N.

    Strata without both treated and control clusters are dropped and the
    remaining weights renormalized.
    """
    levels, n, w1, diff = _stratum_contrasts(cluster_means, treated, strata)
    ok = np.isfinite(diff)
    if not ok.any():
        raise NumericalError("no stratum has both treated and control clusters")
    if not ok.all():
        dropped = [levels[k] for k in np.flatnonzero(~ok)]
        warnings.warn(f"strata {dropped} lack treated or control clusters; dropped",
                      RuntimeWarning, stacklevel=2)
    w = n[ok] / n[ok].sum()
    return float(w @ diff[ok])


def stratified_weighted_estimate(cluster_means, treated, strata) -> float:
    """Closed-form reduction of stratified centering at one informative period."""
    levels, n, w1, diff = _stratum_contrasts(cluster_means, treated, strata)
    w = poststrat_weights(n, w1)
    return float(np.nansum(w * np.where(w > 0, diff, 0.0)))
