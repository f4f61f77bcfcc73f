"""Stepped wedge randomization layouts and their permutation distribution.

Clusters are allocated to sequences (distinct crossover times) by a uniform
permutation with fixed counts per sequence. Every expectation needed by the
estimator and its variance reduces to single-cluster (marginal) and
cluster-pair (pairwise) probabilities, which are computed here in closed form.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .errors import DesignError


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TrialLayout:
    n_clusters: int
    n_periods: int
    sequences: tuple[int, ...]
    allocation: tuple[int, ...]
    cluster_sizes: np.ndarray = field(repr=False)
    observed_crossover: tuple[int, ...] | None = None

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)

    def sequence_index(self, crossover: int) -> int:
        try:
            return self.sequences.index(int(crossover))
        except ValueError:
            raise DesignError(
                f"crossover time {crossover} is not one of the design sequences {self.sequences}"
            ) from None

    def observed_sequence_index(self) -> np.ndarray:
        if self.observed_crossover is None:
            raise DesignError("layout has no observed crossover times attached")
        return np.array([self.sequence_index(r) for r in self.observed_crossover])

    def treatment_matrix(self) -> np.ndarray:
        """N x T matrix of observed treatment indicators X_ij."""
        if self.observed_crossover is None:
            raise DesignError("layout has no observed crossover times attached")
        return np.stack([treatment_path(self, r) for r in self.observed_crossover])

    def with_crossover(self, crossover: Sequence[int]) -> "TrialLayout":
        crossover = tuple(int(r) for r in crossover)
        _check_crossover(self.sequences, self.allocation, self.n_clusters, crossover)
        return replace(self, observed_crossover=crossover)

    def drop_cluster(self, cluster: int) -> "TrialLayout":
        """Layout over the remaining N - 1 clusters (sequence count reduced by one)."""
        if self.observed_crossover is None:
            raise DesignError("dropping a cluster requires observed crossover times")
        s = self.sequence_index(self.observed_crossover[cluster])
        counts = list(self.allocation)
        counts[s] -= 1
        keep = [i for i in range(self.n_clusters) if i != cluster]
        seqs = tuple(r for r, c in zip(self.sequences, counts) if c > 0)
        counts = tuple(c for c in counts if c > 0)
        return TrialLayout(
            n_clusters=self.n_clusters - 1,
            n_periods=self.n_periods,
            sequences=seqs,
            allocation=counts,
            cluster_sizes=_frozen(self.cluster_sizes[keep]),
            observed_crossover=tuple(self.observed_crossover[i] for i in keep),
        )


def _check_crossover(sequences, allocation, n_clusters, crossover) -> None:
    if len(crossover) != n_clusters:
        raise DesignError(
            f"observed_crossover has {len(crossover)} entries for {n_clusters} clusters"
        )
    counts = Counter(crossover)
    for r in counts:
        if r not in sequences:
            raise DesignError(f"observed crossover time {r} is not a design sequence")
    for r, c in zip(sequences, allocation):
        if counts.get(r, 0) != c:
            raise DesignError(
                f"sequence with crossover {r} has {counts.get(r, 0)} clusters, "
                f"allocation says {c}"
            )


def build_layout(
    n_clusters: int,
    n_periods: int,
    sequences: Sequence[int],
    allocation: Sequence[int],
    cluster_sizes=None,
    observed_crossover: Sequence[int] | None = None,
    *,
    allow_empty_periods: bool = False,
) -> TrialLayout:
    """Validate and canonicalize a stepped wedge layout.

    Sequences are sorted by crossover time and duplicate crossover times are
    merged with their allocations summed. ``cluster_sizes`` defaults to one
    observation per cluster-period. ``allow_empty_periods`` admits n_ij = 0,
    which is only meant for sensitivity analyses that drop whole periods.
    """
    n_clusters = int(n_clusters)
    n_periods = int(n_periods)
    if n_clusters < 1 or n_periods < 1:
        raise DesignError("n_clusters and n_periods must be positive")
    sequences = [int(r) for r in sequences]
    allocation = [int(c) for c in allocation]
    if len(sequences) != len(allocation):
        raise DesignError(
            f"{len(sequences)} sequences but {len(allocation)} allocation counts"
        )
    if not sequences:
        raise DesignError("design needs at least one sequence")
    for r in sequences:
        if not 2 <= r <= n_periods:
            raise DesignError(f"crossover time {r} outside 2..{n_periods}")
    if any(c < 1 for c in allocation):
        raise DesignError("allocation counts must be positive")
    merged: dict[int, int] = {}
    for r, c in zip(sequences, allocation):
        merged[r] = merged.get(r, 0) + c
    seqs = tuple(sorted(merged))
    alloc = tuple(merged[r] for r in seqs)
    if sum(alloc) != n_clusters:
        raise DesignError(
            f"allocation sums to {sum(alloc)} but the design has {n_clusters} clusters"
        )

    if cluster_sizes is None:
        sizes = np.ones((n_clusters, n_periods), dtype=int)
    else:
        sizes = np.asarray(cluster_sizes)
        if sizes.shape != (n_clusters, n_periods):
            raise DesignError(
                f"cluster_sizes has shape {sizes.shape}, expected {(n_clusters, n_periods)}"
            )
        if not np.all(sizes == np.round(sizes)):
            raise DesignError("cluster_sizes must be integers")
        sizes = sizes.astype(int)
    floor = 0 if allow_empty_periods else 1
    if np.any(sizes < floor):
        i, j = np.argwhere(sizes < floor)[0]
        raise DesignError(
            f"cluster {i} period {j + 1} has size {sizes[i, j]}; sizes must be >= {floor}"
        )

    crossover = None
    if observed_crossover is not None:
        crossover = tuple(int(r) for r in observed_crossover)
        _check_crossover(seqs, alloc, n_clusters, crossover)
    return TrialLayout(n_clusters, n_periods, seqs, alloc, _frozen(sizes), crossover)


def treatment_path(layout: TrialLayout, crossover: int) -> np.ndarray:
    r = int(crossover)
    if r not in layout.sequences:
        raise DesignError(
            f"crossover time {r} is not one of the design sequences {layout.sequences}"
        )
    return (np.arange(1, layout.n_periods + 1) >= r).astype(int)


@dataclass(frozen=True)
class AssignmentDistribution:
    """Exact marginal and pairwise sequence probabilities.

    ``pairwise[s, t]`` is the probability that two distinct clusters land in
    sequences s and t (sampling without replacement).
    """

    sequences: tuple[int, ...]
    counts: tuple[int, ...]
    marginal: np.ndarray
    pairwise: np.ndarray

    @classmethod
    def from_counts(cls, sequences: Sequence[int], counts: Sequence[int]) -> "AssignmentDistribution":
        c = np.asarray(counts, dtype=float)
        if np.any(c < 0):
            raise DesignError("negative sequence count")
        n = c.sum()
        if n < 1:
            raise DesignError("distribution over zero clusters")
        marginal = c / n
        if n > 1:
            pairwise = (np.outer(c, c) - np.diag(c)) / (n * (n - 1))
        else:
            pairwise = np.zeros((len(c), len(c)))
        return cls(tuple(int(r) for r in sequences), tuple(int(x) for x in counts),
                   _frozen(marginal), _frozen(pairwise))

    @property
    def n_clusters(self) -> int:
        return int(sum(self.counts))


def assignment_distribution(layout: TrialLayout) -> AssignmentDistribution:
    return AssignmentDistribution.from_counts(layout.sequences, layout.allocation)


def leave_one_out_distribution(layout: TrialLayout, drop_cluster: int) -> AssignmentDistribution:
    """Distribution over the other N - 1 clusters, keeping the full sequence list."""
    if layout.observed_crossover is None:
        raise DesignError("leave-one-out distribution needs observed crossover times")
    if not 0 <= drop_cluster < layout.n_clusters:
        raise DesignError(f"cluster index {drop_cluster} out of range")
    s = layout.sequence_index(layout.observed_crossover[drop_cluster])
    counts = list(layout.allocation)
    if counts[s] == 0:
        raise DesignError(f"sequence {layout.sequences[s]} already has no clusters")
    counts[s] -= 1
    return AssignmentDistribution.from_counts(layout.sequences, counts)


def iter_assignments(counts: Sequence[int]) -> Iterator[tuple[int, ...]]:
    """All distinct label vectors with ``counts[s]`` copies of label s."""
    counts = list(counts)
    n = sum(counts)
    out = [0] * n

    def rec(pos: int):
        if pos == n:
            yield tuple(out)
            return
        for s, c in enumerate(counts):
            if c:
                counts[s] -= 1
                out[pos] = s
                yield from rec(pos + 1)
                counts[s] += 1

    yield from rec(0)


def n_assignments(counts: Sequence[int]) -> int:
    from math import factorial, prod

    return factorial(sum(counts)) // prod(factorial(c) for c in counts)
