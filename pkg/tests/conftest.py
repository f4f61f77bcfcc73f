import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from swrobust.data import LongFormatDataset
from swrobust.design import build_layout, iter_assignments

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def make_data(layout, y_of, covariates=None):
    """Long-format data for ``layout`` with y_of(cluster, period, k, x) per observation.

    ``covariates`` maps a name to one value per cluster.
    """
    cl, per, y = [], [], []
    if layout.observed_crossover is None:
        X = np.zeros((layout.n_clusters, layout.n_periods))
    else:
        X = layout.treatment_matrix()
    for i in range(layout.n_clusters):
        for j in range(1, layout.n_periods + 1):
            for k in range(layout.cluster_sizes[i, j - 1]):
                cl.append(i)
                per.append(j)
                y.append(y_of(i, j, k, X[i, j - 1]))
    covs = None
    if covariates:
        cl_arr = np.array(cl)
        covs = {name: np.asarray(v)[cl_arr] for name, v in covariates.items()}
    return LongFormatDataset.from_arrays(np.array(cl), np.array(per), np.array(y), covs)


def random_layout(rng, n_clusters, n_periods, sizes="random", max_size=4):
    """A standard stepped wedge layout with every sequence occupied."""
    seqs = list(range(2, n_periods + 1))
    S = len(seqs)
    cross = list(seqs) + list(rng.choice(seqs, size=n_clusters - S))
    cross = rng.permutation(cross)
    counts = [int(np.sum(cross == r)) for r in seqs]
    if sizes == "random":
        n = rng.integers(1, max_size + 1, size=(n_clusters, n_periods))
    elif sizes == "equal":
        n = np.full((n_clusters, n_periods), int(rng.integers(1, max_size + 1)))
    else:
        n = np.asarray(sizes)
    return build_layout(n_clusters, n_periods, seqs, counts, n, cross)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make():
    return make_data


# --------------------------------------------------------------------------
# acceptance summary lines
# --------------------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


# --------------------------------------------------------------------------
# estimation with fixed nuisance models
# --------------------------------------------------------------------------

def indep():
    from swrobust.working import WorkingCorrelation
    return WorkingCorrelation("independence", {"sigma2_eps": 1.0})


def zero_mean(T):
    from swrobust.working import WorkingMeanModel
    return WorkingMeanModel("zero", None, n_periods=T)


def fixed_fit(data, layout, basis, corr=None, mean=None, strata=None, **kw):
    """Centered estimator with the working models held fixed."""
    from swrobust.centering import center_marginal, center_stratified
    from swrobust.estimator import estimate

    corr = indep() if corr is None else corr
    mean = zero_mean(layout.n_periods) if mean is None else mean
    if strata is None:
        cd = center_marginal(basis, layout)
    else:
        cd = center_stratified(basis, layout, corr, strata)
    return estimate(data, layout, basis, mean, corr, cd, **kw)


def potential_outcomes(data, layout, basis, delta, y0):
    """Observed outcomes Y0 + g(X) delta under the layout's assignment."""
    from swrobust.working import observation_design

    return data.with_outcome(y0 + observation_design(basis, layout, data) @ np.atleast_1d(delta))


def poststrat_instance(rng):
    """Random T = 3 trial with equal period-2 sizes and binary strata.

    Returns (layout, data, strata, oracle) where the oracle is the
    stratum-weighted difference of period-2 cluster means, weighted by
    n_k (w1 / n_k)(w0 / n_k), computed directly from the cluster means.
    """
    while True:
        N = int(rng.integers(4, 11))
        strata = rng.integers(0, 2, size=N)
        cross = rng.choice([2, 3], size=N)
        ok = [len(set(cross[strata == k])) == 2 for k in (0, 1)]
        if len(set(cross)) == 2 and any(ok):
            break
    m2 = int(rng.integers(1, 5))
    sizes = rng.integers(1, 5, size=(N, 3))
    sizes[:, 1] = m2
    counts = [int(np.sum(cross == 2)), int(np.sum(cross == 3))]
    layout = build_layout(N, 3, (2, 3), counts, sizes, cross)
    mu = rng.normal(0, 2, size=(N, 3))
    data = make_data(layout, lambda i, j, k, x: mu[i, j - 1] + 1.5 * x + rng.normal())

    ybar = np.array([data.outcome[(data.cluster == i) & (data.period == 2)].mean()
                     for i in range(N)])
    treated = cross == 2
    num = den = 0.0
    for k in (0, 1):
        sel = strata == k
        n, w1 = sel.sum(), (sel & treated).sum()
        w0 = n - w1
        if w1 == 0 or w0 == 0:
            continue
        w = n * (w1 / n) * (w0 / n)
        num += w * (ybar[sel & treated].mean() - ybar[sel & ~treated].mean())
        den += w
    return layout, data, list(strata), num / den


def dense_design(basis, T, r):
    return np.array([basis.row(r, j) for j in range(1, T + 1)])


def brute_force_variance(data, lay, basis, corr, deltas):
    """V^e by enumerating every assignment with dense observation-level algebra.

    ``deltas`` holds the delta used in each cluster's residual (plug-in or
    leave-one-out). Returns (bread-fixed V, diagonal part, cross part,
    whole-sandwich average).
    """
    N, T = lay.n_clusters, lay.n_periods
    assigns = [[lay.sequences[s] for s in a] for a in iter_assignments(lay.allocation)]
    bnd = data.cluster_bounds()
    per = [data.period[bnd[i]:bnd[i + 1]] for i in range(N)]
    W = [np.linalg.inv(corr.covariance(per[i], T)) for i in range(N)]
    # the centering term: the cluster's design averaged over all assignments
    gbar = [np.mean([dense_design(basis, T, a[i]) for a in assigns], 0)[per[i] - 1]
            for i in range(N)]

    def obs(i, r):
        return dense_design(basis, T, r)[per[i] - 1]

    obs_cross = lay.observed_crossover
    resid = [data.outcome[bnd[i]:bnd[i + 1]] - obs(i, obs_cross[i]) @ deltas[i]
             for i in range(N)]
    B = sum((obs(i, obs_cross[i]) - gbar[i]).T @ W[i] @ obs(i, obs_cross[i]) for i in range(N))
    Binv = np.linalg.inv(B)
    d = basis.dim
    core = np.zeros((d, d))
    core_diag = np.zeros((d, d))
    whole = np.zeros((d, d))
    for a in assigns:
        u = [(obs(i, a[i]) - gbar[i]).T @ W[i] @ resid[i] for i in range(N)]
        U = np.sum(u, 0)
        core += np.outer(U, U)
        core_diag += sum(np.outer(x, x) for x in u)
        Ba = sum((obs(i, a[i]) - gbar[i]).T @ W[i] @ obs(i, a[i]) for i in range(N))
        Ba_inv = np.linalg.inv(Ba)
        whole += Ba_inv @ np.outer(U, U) @ Ba_inv.T
    M = len(assigns)
    V = Binv @ core @ Binv.T / M
    Vd = Binv @ core_diag @ Binv.T / M
    return V, Vd, V - Vd, whole / M
