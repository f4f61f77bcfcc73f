"""Long-format (one row per individual observation) trial data."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .design import TrialLayout, build_layout
from .errors import DataError


@dataclass(frozen=True)
class LongFormatDataset:
    """Observations sorted by (cluster, period), stable within cluster-period.

    ``cluster`` holds integer cluster indices into ``cluster_ids``; the index
    order is the cluster order of the matching :class:`TrialLayout`.
    """

    cluster_ids: tuple[str, ...]
    cluster: np.ndarray = field(repr=False)
    period: np.ndarray = field(repr=False)
    outcome: np.ndarray = field(repr=False)
    covariates: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False)
    subject: np.ndarray | None = field(default=None, repr=False)
    n_dropped: int = 0

    @classmethod
    def from_arrays(cls, cluster, period, outcome, covariates=None, subject=None,
                    cluster_ids: Sequence[str] | None = None, n_dropped: int = 0):
        cluster = np.asarray(cluster)
        if cluster_ids is None:
            if not np.issubdtype(cluster.dtype, np.integer):
                raise DataError("cluster_ids are required for non-integer cluster labels")
            cluster_ids = tuple(str(i) for i in range(int(cluster.max()) + 1))
            idx = cluster.astype(int)
        else:
            cluster_ids = tuple(str(c) for c in cluster_ids)
            if np.issubdtype(cluster.dtype, np.integer):
                idx = cluster.astype(int)
            else:
                lookup = {c: i for i, c in enumerate(cluster_ids)}
                try:
                    idx = np.array([lookup[str(c)] for c in cluster], dtype=int)
                except KeyError as e:
                    raise DataError(f"cluster {e.args[0]!r} is not declared in the design") from None
        period = np.asarray(period)
        if not np.all(period == np.round(period)):
            raise DataError("periods must be integers")
        period = period.astype(int)
        outcome = np.asarray(outcome, dtype=float)
        if not (len(idx) == len(period) == len(outcome)):
            raise DataError("cluster, period and outcome columns differ in length")
        order = np.lexsort((period, idx))
        covs = {k: np.asarray(v)[order] for k, v in (covariates or {}).items()}
        for v in covs.values():
            v.setflags(write=False)
        arrays = [idx[order], period[order], outcome[order]]
        sub = None if subject is None else np.asarray(subject)[order]
        for a in arrays + ([sub] if sub is not None else []):
            a.setflags(write=False)
        return cls(cluster_ids, *arrays, covs, sub, n_dropped)

    @property
    def n_obs(self) -> int:
        return len(self.outcome)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    def cluster_bounds(self) -> np.ndarray:
        return np.searchsorted(self.cluster, np.arange(self.n_clusters + 1))

    def sizes(self, n_periods: int) -> np.ndarray:
        out = np.zeros((self.n_clusters, n_periods), dtype=int)
        np.add.at(out, (self.cluster, self.period - 1), 1)
        return out

    def cluster_level(self, name: str) -> np.ndarray:
        """A covariate that is constant within cluster, one value per cluster."""
        if name not in self.covariates:
            raise DataError(f"unknown covariate column {name!r}")
        col = self.covariates[name]
        b = self.cluster_bounds()
        vals = []
        for i in range(self.n_clusters):
            v = col[b[i]:b[i + 1]]
            if len(v) == 0:
                raise DataError(f"cluster {self.cluster_ids[i]} has no rows")
            if np.any(v != v[0]):
                raise DataError(f"covariate {name!r} varies within cluster {self.cluster_ids[i]}")
            vals.append(v[0])
        return np.array(vals)

    def select_clusters(self, keep: Sequence[int]) -> "LongFormatDataset":
        keep = list(keep)
        remap = {old: new for new, old in enumerate(keep)}
        mask = np.isin(self.cluster, keep)
        new_idx = np.array([remap[c] for c in self.cluster[mask]], dtype=int)
        return LongFormatDataset.from_arrays(
            new_idx, self.period[mask], self.outcome[mask],
            {k: v[mask] for k, v in self.covariates.items()},
            None if self.subject is None else self.subject[mask],
            cluster_ids=[self.cluster_ids[i] for i in keep],
        )

    def drop_periods(self, periods: Sequence[int]) -> "LongFormatDataset":
        mask = ~np.isin(self.period, list(periods))
        return LongFormatDataset.from_arrays(
            self.cluster[mask], self.period[mask], self.outcome[mask],
            {k: v[mask] for k, v in self.covariates.items()},
            None if self.subject is None else self.subject[mask],
            cluster_ids=self.cluster_ids,
        )

    def with_outcome(self, outcome) -> "LongFormatDataset":
        outcome = np.array(outcome, dtype=float)
        if outcome.shape != self.outcome.shape:
            raise DataError("replacement outcome has the wrong length")
        outcome.setflags(write=False)
        return LongFormatDataset(self.cluster_ids, self.cluster, self.period, outcome,
                                 self.covariates, self.subject, self.n_dropped)

    def check_against(self, layout: TrialLayout, *, allow_empty_periods: bool = False) -> None:
        if self.n_clusters != layout.n_clusters:
            raise DataError(
                f"dataset has {self.n_clusters} clusters, design has {layout.n_clusters}"
            )
        if self.n_obs and (self.period.min() < 1 or self.period.max() > layout.n_periods):
            raise DataError(f"periods must lie in 1..{layout.n_periods}")
        sizes = self.sizes(layout.n_periods)
        if not allow_empty_periods and np.any(sizes == 0):
            i, j = np.argwhere(sizes == 0)[0]
            raise DataError(
                f"cluster {self.cluster_ids[i]} has no observations in period {j + 1}"
            )
        if not np.array_equal(sizes, layout.cluster_sizes):
            raise DataError("cluster-period sizes in the data disagree with the design")


def layout_for(dataset: LongFormatDataset, layout: TrialLayout, *,
               allow_empty_periods: bool = False) -> TrialLayout:
    """Copy of ``layout`` with its cluster sizes taken from ``dataset``."""
    return build_layout(layout.n_clusters, layout.n_periods, layout.sequences,
                        layout.allocation, dataset.sizes(layout.n_periods),
                        layout.observed_crossover, allow_empty_periods=allow_empty_periods)
