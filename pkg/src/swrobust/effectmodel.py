"""Linear treatment-contrast bases g(X) for stepped wedge designs.

A basis maps (crossover time r, period j, cluster modifiers) to a row of
length d. Rows are zero before crossover, so the contrast with the
never-treated history is zero by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .design import TrialLayout
from .errors import ConfigError, DesignError


@dataclass(frozen=True)
class TreatmentBasis:
    kind: str
    n_periods: int | None
    base_dim: int
    base_names: tuple[str, ...]
    custom_table: Mapping[int, np.ndarray] | None = field(default=None, repr=False)
    modifier_names: tuple[str, ...] = ()
    # encoded h(S_i) per cluster, without the leading main-effect 1
    modifier_matrix: np.ndarray | None = field(default=None, repr=False)
    encoding: str | None = None

    @property
    def n_modifier_columns(self) -> int:
        return 0 if self.modifier_matrix is None else self.modifier_matrix.shape[1]

    @property
    def dim(self) -> int:
        return self.base_dim * (1 + self.n_modifier_columns)

    @property
    def column_names(self) -> tuple[str, ...]:
        names = list(self.base_names)
        for m in self.modifier_names:
            names += [f"{b}:{m}" for b in self.base_names]
        return tuple(names)

    def base_row(self, crossover: int, period: int) -> np.ndarray:
        r, j = int(crossover), int(period)
        if j < 1 or (self.n_periods is not None and j > self.n_periods):
            raise DesignError(f"period {j} outside 1..{self.n_periods}")
        if self.kind == "it":
            return np.array([1.0 if j >= r else 0.0])
        if self.kind == "eti":
            row = np.zeros(self.base_dim)
            if j >= r:
                row[j - r] = 1.0
            return row
        try:
            return np.asarray(self.custom_table[r][j - 1], dtype=float)
        except KeyError:
            raise DesignError(f"custom basis has no entry for crossover {r}") from None

    def row(self, crossover: int, period: int, modifier_values=None) -> np.ndarray:
        base = self.base_row(crossover, period)
        if self.n_modifier_columns == 0:
            return base
        if modifier_values is None:
            raise DesignError("basis has modifiers; modifier values are required")
        h = np.concatenate([[1.0], np.asarray(modifier_values, dtype=float)])
        return np.kron(h, base)

    def period_design(self, crossover: int, cluster: int | None = None,
                      n_periods: int | None = None) -> np.ndarray:
        """T x d matrix of basis rows for one cluster."""
        T = self.n_periods if self.n_periods is not None else n_periods
        if T is None:
            raise DesignError("number of periods unknown for this basis")
        base = np.stack([self.base_row(crossover, j) for j in range(1, T + 1)])
        if self.n_modifier_columns == 0:
            return base
        if cluster is None:
            raise DesignError("basis has modifiers; a cluster index is required")
        h = np.concatenate([[1.0], self.modifier_matrix[cluster]])
        return np.kron(h[None, :], base)

    def basis_fn(self, crossover: int, period: int, modifier_values=None) -> np.ndarray:
        return self.row(crossover, period, modifier_values)


def it_basis(n_periods: int | None = None) -> TreatmentBasis:
    return TreatmentBasis("it", n_periods, 1, ("delta",))


def eti_basis(n_periods: int) -> TreatmentBasis:
    if n_periods < 2:
        raise DesignError("exposure-time basis needs at least 2 periods")
    d = n_periods - 1
    return TreatmentBasis("eti", n_periods, d, tuple(f"tau={t}" for t in range(1, d + 1)))


def custom_basis(n_periods: int, table: Mapping[int, Sequence[Sequence[float]]],
                 names: Sequence[str] | None = None) -> TreatmentBasis:
    """Basis given as crossover -> T x d table of rows.

    Rows before the crossover must be zero.
    """
    if not table:
        raise ConfigError("custom basis table is empty")
    parsed: dict[int, np.ndarray] = {}
    dim = None
    for r, rows in table.items():
        r = int(r)
        a = np.asarray(rows, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if a.shape[0] != n_periods:
            raise ConfigError(f"custom basis for crossover {r} has {a.shape[0]} rows, expected {n_periods}")
        if dim is None:
            dim = a.shape[1]
        elif a.shape[1] != dim:
            raise ConfigError("custom basis rows have inconsistent widths")
        if np.any(a[: r - 1] != 0):
            raise ConfigError(f"custom basis for crossover {r} is nonzero before crossover")
        a.setflags(write=False)
        parsed[r] = a
    if names is None:
        names = tuple(f"delta{k + 1}" for k in range(dim))
    elif len(names) != dim:
        raise ConfigError("custom basis names do not match its width")
    return TreatmentBasis("custom", n_periods, dim, tuple(names), parsed)


def encode_modifiers(values: Mapping[str, Sequence], encoding: str = "centered"):
    """Encode cluster-level modifiers as columns of h(S_i).

    Returns (names, N x q matrix). ``strata`` makes dummies for every level but
    the first (sorted) one.
    """
    if encoding not in ("raw", "centered", "strata"):
        raise ConfigError(f"unknown modifier encoding {encoding!r}")
    names: list[str] = []
    cols: list[np.ndarray] = []
    for name, vals in values.items():
        vals = list(vals)
        missing = [i for i, v in enumerate(vals) if v is None or (isinstance(v, float) and np.isnan(v))]
        if missing:
            raise DesignError(f"modifier {name!r} missing for cluster(s) {missing}")
        if encoding == "strata":
            levels = sorted(set(vals), key=str)
            for lev in levels[1:]:
                names.append(f"{name}={lev}")
                cols.append(np.array([1.0 if v == lev else 0.0 for v in vals]))
        else:
            try:
                x = np.asarray(vals, dtype=float)
            except ValueError:
                raise ConfigError(f"modifier {name!r} is not numeric; use strata encoding") from None
            if encoding == "centered":
                x = x - x.mean()
            names.append(name)
            cols.append(x)
    return tuple(names), np.column_stack(cols) if cols else np.zeros((0, 0))


def with_modifiers(base: TreatmentBasis, modifier_spec: Mapping[str, Sequence],
                   encoding: str = "centered") -> TreatmentBasis:
    """Add interaction columns g(x) * h(S_i); main-effect columns come first."""
    if base.n_modifier_columns:
        raise ConfigError("basis already carries modifiers")
    names, h = encode_modifiers(modifier_spec, encoding)
    h = np.array(h, dtype=float)
    h.setflags(write=False)
    return replace(base, modifier_names=names, modifier_matrix=h, encoding=encoding)


def cluster_design(basis: TreatmentBasis, layout: TrialLayout, cluster: int,
                   crossover: int) -> np.ndarray:
    """Per-observation design: period rows replicated n_ij times."""
    sizes = layout.cluster_sizes[cluster]
    g = period_design(basis, layout, crossover, cluster)
    return np.repeat(g, sizes, axis=0)


def period_design(basis: TreatmentBasis, layout: TrialLayout, crossover: int,
                  cluster: int | None = None) -> np.ndarray:
    if basis.n_periods is not None and basis.n_periods != layout.n_periods:
        raise DesignError(
            f"basis built for {basis.n_periods} periods, layout has {layout.n_periods}"
        )
    return basis.period_design(crossover, cluster, layout.n_periods)
