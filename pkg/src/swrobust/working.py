"""Working (nuisance) models: control-mean trend and inverse covariance blocks.

Every supported covariance is ``s2 * I + Z D Z'`` where the random-effect
design Z is constant within cluster-period. For any vector v,
``P' W v`` then depends on v only through its period sums ``P' v``, which is
what :func:`period_operator` exploits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import LongFormatDataset
from .design import TrialLayout
from .effectmodel import TreatmentBasis, period_design
from .errors import ConfigError, DataError, IdentificationError, NumericalError

MEAN_KINDS = ("zero", "linear_time", "categorical_time", "custom_regression")
CORR_KINDS = ("independence", "exchangeable", "nested_exchangeable_with_time",
              "random_intercept_slope")


def observation_design(basis: TreatmentBasis, layout: TrialLayout, data: LongFormatDataset,
                       crossover: Sequence[int] | None = None) -> np.ndarray:
    """n_obs x d treatment design g(X) at the given (default: observed) crossover."""
    crossover = layout.observed_crossover if crossover is None else crossover
    out = np.empty((data.n_obs, basis.dim))
    b = data.cluster_bounds()
    for i in range(layout.n_clusters):
        g = period_design(basis, layout, crossover[i], i)
        out[b[i]:b[i + 1]] = g[data.period[b[i]:b[i + 1]] - 1]
    return out


# --------------------------------------------------------------------------
# Working mean
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkingMeanModel:
    kind: str
    time: str | None
    covariates: tuple[str, ...] = ()
    coefficients: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    column_names: tuple[str, ...] = ()
    n_periods: int = 0

    def regressors(self, data: LongFormatDataset) -> np.ndarray:
        return mean_regressors(self.time, self.covariates, data, self.n_periods)[0]

    def values(self, data: LongFormatDataset) -> np.ndarray:
        """m~ for every observation of ``data``."""
        if self.kind == "zero":
            return np.zeros(data.n_obs)
        return self.regressors(data) @ self.coefficients


def parse_mean_spec(spec: str) -> tuple[str, str | None, tuple[str, ...]]:
    """Map a config string to (kind, time term, covariate columns).

    Accepts ``zero``, ``linear``, ``categorical`` or a ``+``-joined formula such
    as ``categorical + baseline_size``.
    """
    terms = [t.strip() for t in str(spec).split("+") if t.strip()]
    if not terms:
        raise ConfigError("empty working_mean specification")
    aliases = {"linear": "linear", "linear_time": "linear",
               "categorical": "categorical", "categorical_time": "categorical"}
    if terms == ["zero"]:
        return "zero", None, ()
    time = None
    covs = []
    for t in terms:
        if t in aliases:
            if time is not None:
                raise ConfigError(f"working_mean has two time terms: {spec!r}")
            time = aliases[t]
        elif t == "zero":
            raise ConfigError("'zero' cannot be combined with other mean terms")
        else:
            covs.append(t)
    if not covs:
        return f"{time}_time", time, ()
    return "custom_regression", time, tuple(covs)


def mean_regressors(time: str | None, covariates: Sequence[str], data: LongFormatDataset,
                    n_periods: int) -> tuple[np.ndarray, tuple[str, ...]]:
    cols: list[np.ndarray] = []
    names: list[str] = []
    j = data.period.astype(float)
    if time == "categorical":
        for p in range(1, n_periods + 1):
            cols.append((data.period == p).astype(float))
            names.append(f"period={p}")
    else:
        cols.append(np.ones(data.n_obs))
        names.append("intercept")
        if time == "linear":
            cols.append(j)
            names.append("period")
    for c in covariates:
        if c not in data.covariates:
            raise ConfigError(f"working mean refers to unknown column {c!r}")
        try:
            cols.append(np.asarray(data.covariates[c], dtype=float))
        except ValueError:
            raise DataError(f"mean-model covariate {c!r} is not numeric") from None
        names.append(c)
    return np.column_stack(cols), tuple(names)


def _check_rank(X: np.ndarray, names: Sequence[str], what: str) -> None:
    for k, name in enumerate(names):
        if not np.any(X[:, k]):
            raise IdentificationError(f"{what}: level {name!r} has no observations")
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        # name the first column that is a combination of the earlier ones
        for k in range(1, X.shape[1] + 1):
            if np.linalg.matrix_rank(X[:, :k]) < k:
                raise IdentificationError(f"{what}: column {names[k - 1]!r} is collinear")


def fit_working_mean(kind: str, data: LongFormatDataset, layout: TrialLayout,
                     basis: TreatmentBasis, pilot_delta, covariates: Sequence[str] = (),
                     time: str | None = None) -> WorkingMeanModel:
    """Least-squares fit of Y - g(X) pilot_delta on the working-mean regressors."""
    if kind not in MEAN_KINDS:
        raise ConfigError(f"unknown working mean kind {kind!r}")
    if kind == "zero":
        return WorkingMeanModel("zero", None, n_periods=layout.n_periods)
    if kind == "linear_time":
        time = "linear"
    elif kind == "categorical_time":
        time = "categorical"
    X, names = mean_regressors(time, tuple(covariates), data, layout.n_periods)
    _check_rank(X, names, "working mean")
    g = observation_design(basis, layout, data)
    target = data.outcome - g @ np.asarray(pilot_delta, dtype=float)
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    return WorkingMeanModel(kind, time, tuple(covariates), coef, names, layout.n_periods)


def joint_least_squares(data: LongFormatDataset, layout: TrialLayout, basis: TreatmentBasis,
                        time: str | None, covariates: Sequence[str] = ()):
    """OLS of Y on [g(X), mean regressors]; returns (delta, gamma)."""
    g = observation_design(basis, layout, data)
    X, names = mean_regressors(time, tuple(covariates), data, layout.n_periods)
    D = np.column_stack([g, X])
    _check_rank(D, basis.column_names + names, "joint least squares")
    coef, *_ = np.linalg.lstsq(D, data.outcome, rcond=None)
    return coef[: basis.dim], coef[basis.dim:]


# --------------------------------------------------------------------------
# Working correlation
# --------------------------------------------------------------------------

_PARAMS = {
    "independence": ("sigma2_eps",),
    "exchangeable": ("sigma2_tau", "sigma2_eps"),
    "nested_exchangeable_with_time": ("sigma2_tau", "sigma2_cp", "sigma2_eps"),
    "random_intercept_slope": ("sigma2_tau", "sigma2_eta", "sigma2_eps"),
}


@dataclass(frozen=True)
class WorkingCorrelation:
    kind: str
    params: Mapping[str, float]
    diagnostics: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in CORR_KINDS:
            raise ConfigError(f"unknown working correlation {self.kind!r}")
        missing = set(_PARAMS[self.kind]) - set(self.params)
        if missing:
            raise ConfigError(f"{self.kind} needs parameters {sorted(missing)}")
        if any(self.params[k] < 0 for k in _PARAMS[self.kind]):
            raise NumericalError(f"negative variance component in {dict(self.params)}")

    @property
    def correlation(self) -> float:
        """Intra-cluster correlation of the exchangeable part."""
        tau = self.params.get("sigma2_tau", 0.0)
        tot = tau + self.params.get("sigma2_cp", 0.0) + self.params["sigma2_eps"]
        return tau / tot if tot > 0 else float("nan")

    def _effects(self, n_periods: int):
        """Random-effect design at period level (T x q) and its variances."""
        t = np.arange(1, n_periods + 1, dtype=float)
        cols, var = [], []
        p = self.params
        if self.kind != "independence" and p["sigma2_tau"] > 0:
            cols.append(np.ones((n_periods, 1)))
            var.append([p["sigma2_tau"]])
        if self.kind == "nested_exchangeable_with_time" and p["sigma2_cp"] > 0:
            cols.append(np.eye(n_periods))
            var.append([p["sigma2_cp"]] * n_periods)
        if self.kind == "random_intercept_slope" and p["sigma2_eta"] > 0:
            cols.append(t[:, None])
            var.append([p["sigma2_eta"]])
        if not cols:
            return np.zeros((n_periods, 0)), np.zeros(0)
        return np.hstack(cols), np.concatenate(var)

    def _eps2(self) -> float:
        s2 = self.params["sigma2_eps"]
        if s2 <= 0:
            raise NumericalError(
                f"working covariance {self.kind} is not positive definite "
                f"(residual variance {s2})"
            )
        return float(s2)

    def covariance(self, periods: np.ndarray, n_periods: int) -> np.ndarray:
        """Dense V_i for observations at the given (1-based) periods."""
        Zp, d = self._effects(n_periods)
        Z = Zp[np.asarray(periods) - 1]
        return self.params["sigma2_eps"] * np.eye(len(periods)) + (Z * d) @ Z.T

    def woodbury(self, sizes: np.ndarray):
        """(s2, Zp, C) with W = (I - Z C Z') / s2 and Z = P Zp."""
        s2 = self._eps2()
        Zp, d = self._effects(len(sizes))
        if Zp.shape[1] == 0:
            return s2, Zp, np.zeros((0, 0))
        n = np.asarray(sizes, dtype=float)
        return s2, Zp, _core(s2, d, Zp.T @ (n[:, None] * Zp))

    def period_operator(self, sizes: np.ndarray) -> np.ndarray:
        """T x T matrix Pi with P' W v = Pi (P' v) for this cluster's sizes."""
        s2, Zp, C = self.woodbury(sizes)
        T = len(sizes)
        if Zp.shape[1] == 0:
            return np.eye(T) / s2
        NZ = np.asarray(sizes, dtype=float)[:, None] * Zp
        return (np.eye(T) - NZ @ C @ Zp.T) / s2


def _core(s2: float, d: np.ndarray, ZtZ: np.ndarray) -> np.ndarray:
    """(diag(s2 / d) + Z'Z)^{-1}, written so tiny components do not overflow."""
    r = np.sqrt(d)
    return r[:, None] * np.linalg.inv(s2 * np.eye(len(d)) + r[:, None] * ZtZ * r[None, :]) * r[None, :]


def exchangeable(rho: float, total: float = 1.0) -> WorkingCorrelation:
    return WorkingCorrelation("exchangeable",
                              {"sigma2_tau": rho * total, "sigma2_eps": (1 - rho) * total})


def inverse_correlation_blocks(corr: WorkingCorrelation, layout: TrialLayout,
                               cluster: int) -> np.ndarray:
    """Dense W_i = V_i^{-1} by a Woodbury update, observations ordered by period."""
    sizes = layout.cluster_sizes[cluster]
    periods = np.repeat(np.arange(1, layout.n_periods + 1), sizes)
    s2 = corr._eps2()
    Zp, d = corr._effects(layout.n_periods)
    n = len(periods)
    if Zp.shape[1] == 0:
        return np.eye(n) / s2
    Z = Zp[periods - 1]
    W = (np.eye(n) - Z @ _core(s2, d, Z.T @ Z) @ Z.T) / s2
    return (W + W.T) / 2


def _cell_sums(residuals, data: LongFormatDataset, n_periods: int):
    N = data.n_clusters
    S = np.zeros((N, n_periods))
    Q = np.zeros((N, n_periods))
    n = np.zeros((N, n_periods))
    idx = (data.cluster, data.period - 1)
    np.add.at(S, idx, residuals)
    np.add.at(Q, idx, residuals ** 2)
    np.add.at(n, idx, 1.0)
    return S, Q, n


def _truncate(name: str, value: float, notes: list[str]) -> float:
    if value < 0:
        msg = f"moment estimate of {name} was {value:.4g}; truncated at 0"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)
        return 0.0
    return float(value)


def fit_working_correlation(kind: str, residuals, layout: TrialLayout,
                            data: LongFormatDataset) -> WorkingCorrelation:
    """Method-of-moments variance components from pilot residuals.

    Cross-products of distinct residual pairs within a cluster estimate the
    shared components; the residual variance is what remains of the mean
    square. Negative components are truncated at zero.
    """
    if kind not in CORR_KINDS:
        raise ConfigError(f"unknown working correlation {kind!r}")
    r = np.asarray(residuals, dtype=float)
    T = layout.n_periods
    S, Q, n = _cell_sums(r, data, T)
    m2 = Q.sum() / n.sum()
    notes: list[str] = []
    if kind == "independence":
        return WorkingCorrelation(kind, {"sigma2_eps": m2})

    Si, Qi, ni = S.sum(1), Q.sum(1), n.sum(1)
    if kind == "exchangeable":
        den = np.sum(ni * (ni - 1))
        if den == 0:
            raise DataError("exchangeable correlation needs clusters with >= 2 observations")
        tau = _truncate("sigma2_tau", np.sum(Si ** 2 - Qi) / den, notes)
        params = _floor_eps(m2, {"sigma2_tau": tau}, 1.0, notes)
        return WorkingCorrelation(kind, params, tuple(notes))

    if kind == "nested_exchangeable_with_time":
        den_same = np.sum(n * (n - 1))
        if den_same == 0:
            raise DataError("cluster-period component needs some cluster-period with >= 2 observations")
        den_diff = np.sum(ni ** 2 - (n ** 2).sum(1))
        same = np.sum(S ** 2 - Q) / den_same
        tau = np.sum(Si ** 2 - (S ** 2).sum(1)) / den_diff if den_diff > 0 else 0.0
        tau = _truncate("sigma2_tau", tau, notes)
        cp = _truncate("sigma2_cp", same - tau, notes)
        params = _floor_eps(m2, {"sigma2_tau": tau, "sigma2_cp": cp}, np.ones(2), notes)
        return WorkingCorrelation(kind, params, tuple(notes))

    # random intercept + slope on period: E[r r'] = tau + eta * j j' for distinct pairs
    t = np.arange(1, T + 1, dtype=float)
    jj = np.outer(t, t)
    count = np.einsum("ij,ik->jk", n, n) - np.diag(n.sum(0))
    prod = np.einsum("ij,ik->jk", S, S) - np.diag(Q.sum(0))
    A = np.array([[count.sum(), (count * jj).sum()],
                  [(count * jj).sum(), (count * jj ** 2).sum()]])
    b = np.array([prod.sum(), (prod * jj).sum()])
    if count.sum() == 0:
        raise DataError("random intercept/slope needs clusters with >= 2 observations")
    try:
        tau, eta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        tau, eta = b[0] / A[0, 0], 0.0
    if tau < 0 or eta < 0:
        # one-component fits on the boundary, keep the better-fitting admissible one
        cand = []
        if A[0, 0] > 0:
            cand.append((max(b[0] / A[0, 0], 0.0), 0.0))
        if A[1, 1] > 0:
            cand.append((0.0, max(b[1] / A[1, 1], 0.0)))
        sse = [x @ A @ x - 2 * x @ b for x in map(np.array, cand)]
        new = cand[int(np.argmin(sse))]
        for name, old, val in (("sigma2_tau", tau, new[0]), ("sigma2_eta", eta, new[1])):
            if old < 0:
                _truncate(name, old, notes)
        tau, eta = new
    mean_j2 = (n.sum(0) * t ** 2).sum() / n.sum()
    params = _floor_eps(m2, {"sigma2_tau": float(tau), "sigma2_eta": float(eta)},
                        np.array([1.0, mean_j2]), notes)
    return WorkingCorrelation(kind, params, tuple(notes))


EPS_FLOOR = 0.05


def _floor_eps(m2, shared: dict, loadings, notes: list[str]) -> dict:
    """Residual variance as m2 minus the shared variance, kept above a floor.

    When the shared components explain more than (1 - EPS_FLOOR) of the mean
    square they are scaled down together, so the working covariance stays
    positive definite.
    """
    vals = np.array(list(shared.values()), dtype=float)
    explained = float(np.dot(np.broadcast_to(loadings, vals.shape), vals))
    floor = EPS_FLOOR * m2
    if m2 > 0 and m2 - explained < floor:
        scale = (m2 - floor) / explained
        vals = vals * scale
        msg = (f"shared variance components exceed the residual mean square; "
               f"scaled by {scale:.3g} to keep sigma2_eps at {EPS_FLOOR:g} x m2")
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        notes.append(msg)
        explained = m2 - floor
    out = {k: float(v) for k, v in zip(shared, vals)}
    out["sigma2_eps"] = float(m2 - explained)
    return out
