"""End-to-end analysis of one stepped wedge dataset."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping

import numpy as np

from .centering import CenteredDesign, center_marginal, center_stratified
from .data import LongFormatDataset
from .design import TrialLayout
from .effectmodel import TreatmentBasis, custom_basis, eti_basis, it_basis, with_modifiers
from .errors import ConfigError, DataError
from .estimator import EstimationResult, estimate, estimate_gee_comparator
from .inference import (ConfidenceInterval, VarianceEstimate, confidence_interval,
                        loo_influence, variance_permutation)
from .working import (WorkingCorrelation, WorkingMeanModel, fit_working_correlation,
                      fit_working_mean, joint_least_squares, observation_design,
                      parse_mean_spec)

CORR_ALIASES = {
    "independence": "independence",
    "exchangeable": "exchangeable",
    "cluster": "exchangeable",
    "cluster_time": "random_intercept_slope",
    "random_intercept_slope": "random_intercept_slope",
    "nested": "nested_exchangeable_with_time",
    "nested_exchangeable": "nested_exchangeable_with_time",
    "nested_exchangeable_with_time": "nested_exchangeable_with_time",
}


@dataclass(frozen=True)
class AnalysisConfig:
    effect: str = "it"
    custom_basis: Mapping[int, Any] | None = None
    custom_names: tuple[str, ...] | None = None
    modifiers: tuple[str, ...] = ()
    modifier_encoding: str = "centered"
    working_mean: str = "categorical"
    working_corr: str = "exchangeable"
    corr_params: Mapping[str, float] | None = None
    adjust_design: str = "none"
    strata_threshold: Any = "median"
    level: float = 0.95
    quantile: str = "normal"
    loo_distribution: str = "reduced"
    loo_refit: bool = False
    variance_method: str = "bread_fixed"
    estimator: str = "proposed"
    # None: permutation weights for marginal, empirical for stratified centering
    centering: str | None = None

    def __post_init__(self):
        if self.effect not in ("it", "eti", "custom"):
            raise ConfigError(f"effect must be it, eti or custom, not {self.effect!r}")
        if self.effect == "custom" and not self.custom_basis:
            raise ConfigError("effect = custom needs a custom basis table")
        if self.working_corr not in CORR_ALIASES:
            raise ConfigError(f"unknown working_corr {self.working_corr!r}")
        parse_mean_spec(self.working_mean)
        if self.adjust_design != "none" and not str(self.adjust_design).startswith("strata:"):
            raise ConfigError("adjust.design must be 'none' or 'strata:<column>'")
        if self.estimator not in ("proposed", "gee"):
            raise ConfigError(f"estimator must be proposed or gee, not {self.estimator!r}")
        if self.loo_distribution not in ("reduced", "full"):
            raise ConfigError("loo_distribution must be reduced or full")
        if self.variance_method not in ("bread_fixed", "full_enumeration"):
            raise ConfigError("variance method must be bread_fixed or full_enumeration")
        if self.quantile not in ("normal", "t"):
            raise ConfigError("quantile must be normal or t")
        if self.centering not in (None, "permutation", "empirical"):
            raise ConfigError("centering must be permutation or empirical")
        if not 0 < float(self.level) < 1:
            raise ConfigError("level must lie in (0, 1)")

    @property
    def corr_kind(self) -> str:
        return CORR_ALIASES[self.working_corr]

    @property
    def strata_column(self) -> str | None:
        if self.adjust_design == "none":
            return None
        return self.adjust_design.split(":", 1)[1].strip()


@dataclass(frozen=True)
class AnalysisResult:
    config: AnalysisConfig
    estimation: EstimationResult
    working_mean: WorkingMeanModel
    working_corr: WorkingCorrelation
    variance_plugin: VarianceEstimate | None = None
    variance_loo: VarianceEstimate | None = None
    ci_plugin: ConfidenceInterval | None = None
    ci_loo: ConfidenceInterval | None = None
    loo_table: list[dict] = field(default_factory=list)
    pilot_delta: np.ndarray | None = None
    diagnostics: tuple[str, ...] = ()

    @property
    def delta(self) -> np.ndarray:
        return self.estimation.delta_hat


def build_basis(config: AnalysisConfig, layout: TrialLayout,
                data: LongFormatDataset) -> TreatmentBasis:
    T = layout.n_periods
    if config.effect == "it":
        basis = it_basis(T)
    elif config.effect == "eti":
        basis = eti_basis(T)
    else:
        basis = custom_basis(T, config.custom_basis, config.custom_names)
    if config.modifiers:
        values = {}
        for name in config.modifiers:
            try:
                values[name] = data.cluster_level(name)
            except DataError as e:
                raise ConfigError(str(e)) from None
        basis = with_modifiers(basis, values, config.modifier_encoding)
    return basis


def stratum_labels(data: LongFormatDataset, column: str, threshold: Any = "median") -> list:
    """Cluster-level strata from a covariate column.

    Numeric columns are split at ``threshold`` (``median`` by default) into
    ``<= t`` and ``> t``; ``threshold = "levels"`` or a non-numeric column
    uses the distinct values as strata.
    """
    if column not in data.covariates:
        raise ConfigError(f"stratification column {column!r} is not in the data")
    vals = data.cluster_level(column)
    if threshold == "levels":
        return [str(v) for v in vals]
    try:
        x = vals.astype(float)
    except ValueError:
        return [str(v) for v in vals]
    t = float(np.median(x)) if threshold == "median" else float(threshold)
    return ["high" if v > t else "low" for v in x]


def center(config: AnalysisConfig, basis: TreatmentBasis, layout: TrialLayout,
           data: LongFormatDataset, corr: WorkingCorrelation | None = None) -> CenteredDesign:
    col = config.strata_column
    if col is None:
        return center_marginal(basis, layout, corr=corr,
                               weighting=config.centering or "permutation")
    return center_stratified(basis, layout, corr,
                             stratum_labels(data, col, config.strata_threshold),
                             weighting=config.centering or "empirical")


def fit_nuisance(config: AnalysisConfig, basis: TreatmentBasis, layout: TrialLayout,
                 data: LongFormatDataset):
    """Pilot estimate, then working mean and working correlation fits."""
    kind, time, covs = parse_mean_spec(config.working_mean)
    if kind == "zero":
        indep = WorkingCorrelation("independence", {"sigma2_eps": 1.0})
        zero = WorkingMeanModel("zero", None, n_periods=layout.n_periods)
        pilot = estimate(data, layout, basis, zero, indep, center(config, basis, layout, data, indep),
                         leave_one_out=False).delta_hat
    else:
        pilot, _ = joint_least_squares(data, layout, basis, time, covs)
    mean = fit_working_mean(kind, data, layout, basis, pilot, covs, time)
    if config.corr_params is not None:
        corr = WorkingCorrelation(config.corr_kind, dict(config.corr_params))
    else:
        resid = data.outcome - observation_design(basis, layout, data) @ pilot - mean.values(data)
        corr = fit_working_correlation(config.corr_kind, resid, layout, data)
    return pilot, mean, corr


def fit_trial(data: LongFormatDataset, layout: TrialLayout, config: AnalysisConfig, *,
              inference: bool = True, leave_one_out: bool = True) -> AnalysisResult:
    data.check_against(layout, allow_empty_periods=bool(np.any(layout.cluster_sizes == 0)))
    basis = build_basis(config, layout, data)

    if config.estimator == "gee":
        return _fit_gee(data, layout, config, basis, leave_one_out)

    pilot, mean, corr = fit_nuisance(config, basis, layout, data)
    centered = center(config, basis, layout, data, corr)
    est = estimate(data, layout, basis, mean, corr, centered,
                   leave_one_out=leave_one_out, loo_distribution=config.loo_distribution)
    notes = list(est.diagnostics)
    if leave_one_out and config.loo_refit:
        est = _refit_loo(data, layout, config, est, basis)
    if not inference:
        return AnalysisResult(config, est, mean, corr, pilot_delta=pilot,
                              diagnostics=tuple(notes))

    v_plug = variance_permutation(est, "plugin", method=config.variance_method)
    df = layout.n_clusters - 1
    ci_plug = confidence_interval(est.delta_hat, v_plug, config.level, config.quantile, df)
    v_loo = ci_loo = None
    table = []
    if leave_one_out:
        v_loo = variance_permutation(est, "leave_one_out", method=config.variance_method)
        ci_loo = confidence_interval(est.delta_hat, v_loo, config.level, config.quantile, df)
        table = loo_influence(est, layout, data.cluster_ids)
        notes += v_loo.diagnostics
    notes += v_plug.diagnostics + ci_plug.diagnostics
    return AnalysisResult(config, est, mean, corr, v_plug, v_loo, ci_plug, ci_loo, table,
                          pilot, tuple(dict.fromkeys(notes)))


def _refit_loo(data, layout, config, est, basis) -> EstimationResult:
    """Leave-one-out deltas with the working models refit on N - 1 clusters."""
    N = layout.n_clusters
    loo = np.full_like(est.loo_deltas, np.nan)
    for i in range(N):
        keep = [k for k in range(N) if k != i]
        sub_layout = layout.drop_cluster(i)
        sub = data.select_clusters(keep)
        sub_config = config
        if config.loo_distribution == "full":
            sub_config = replace(config, loo_distribution="reduced")
        try:
            loo[i] = fit_trial(sub, sub_layout, sub_config, inference=False,
                               leave_one_out=False).delta
        except Exception:  # noqa: BLE001 - recorded as a missing estimate
            continue
    KG = np.einsum("itu,iud->itd", est.K, est.centered.observed_design())
    z_loo = est.h - np.einsum("itd,id->it", KG, loo)
    meta = dict(est.meta, loo_refit=True)
    return replace(est, loo_deltas=loo, weighted_residuals_loo=z_loo, meta=meta)


def _fit_gee(data, layout, config, basis, leave_one_out) -> AnalysisResult:
    kind, time, covs = parse_mean_spec(config.working_mean)
    if kind == "zero":
        pilot = np.zeros(basis.dim)
        mean = WorkingMeanModel("zero", None, n_periods=layout.n_periods)
        resid = data.outcome - observation_design(basis, layout, data) @ np.zeros(basis.dim)
    else:
        pilot, _ = joint_least_squares(data, layout, basis, time, covs)
        mean = fit_working_mean(kind, data, layout, basis, pilot, covs, time)
        resid = data.outcome - observation_design(basis, layout, data) @ pilot - mean.values(data)
    if config.corr_params is not None:
        corr = WorkingCorrelation(config.corr_kind, dict(config.corr_params))
    else:
        corr = fit_working_correlation(config.corr_kind, resid, layout, data)
    est = estimate_gee_comparator(data, layout, basis, mean, corr, leave_one_out=leave_one_out)
    table = loo_influence(est, layout, data.cluster_ids) if leave_one_out else []
    return AnalysisResult(config, est, mean, corr, loo_table=table, pilot_delta=pilot,
                          diagnostics=est.diagnostics)
