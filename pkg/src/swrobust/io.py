"""File formats: long-format CSV data, TOML design and config files, reports.

Design file (TOML)::

    n_periods = 5
    sequences = [2, 3, 4, 5]        # optional, derived from crossover
    allocation = [3, 3, 2, 2]       # optional, checked against crossover
    [clusters]
    ids = ["c01", "c02", ...]
    crossover = [3, 5, ...]
    sizes = [[12, 12, ...], ...]    # optional, otherwise taken from the data

Config file (TOML), every key optional::

    effect = "it"                   # it | eti | custom
    working_mean = "categorical"    # zero | linear | categorical | "<time> + col"
    working_corr = "exchangeable"   # independence | exchangeable | cluster_time | nested
    estimator = "proposed"          # proposed | gee
    [working_params]                # fixed variance components, skips the fit
    [custom]                        # basis = {"2" = [[0], [1], [1]], ...}, names = [..]
    [modifiers]                     # columns = [..], encoding = "centered"
    [adjust]                        # design = "none" | "strata:<col>", threshold, centering
    [inference]                     # level, quantile, loo_distribution, loo_refit, variance_method
    [data]                          # cluster, period, outcome, subject, covariates, max_unparseable
    [simulation]                    # setting, configs, reps, seed, estimators, strata_threshold
"""

from __future__ import annotations

import csv
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import jsonschema

from .data import LongFormatDataset
from .design import TrialLayout, build_layout
from .errors import ConfigError, DataError, DesignError
from .pipeline import AnalysisConfig, AnalysisResult, fit_trial

MISSING = {"", "na", "nan", "null", "none", "."}


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSchema:
    cluster: str = "cluster"
    period: str = "period"
    outcome: str = "outcome"
    subject: str | None = None
    # None reads every other column as a covariate
    covariates: tuple[str, ...] | None = None
    max_unparseable: int = 0

    @classmethod
    def from_mapping(cls, m: Mapping[str, Any]) -> "DatasetSchema":
        known = {"cluster", "period", "outcome", "subject", "covariates", "max_unparseable"}
        unknown = set(m) - known
        if unknown:
            raise ConfigError(f"unknown [data] keys: {sorted(unknown)}")
        kw = dict(m)
        if "covariates" in kw and kw["covariates"] is not None:
            kw["covariates"] = tuple(kw["covariates"])
        return cls(**kw)


def _is_missing(v: str | None) -> bool:
    return v is None or v.strip().lower() in MISSING


def _convert_column(values: list[str]) -> np.ndarray:
    try:
        return np.array([float(v) for v in values])
    except ValueError:
        return np.array(values, dtype=object)


def read_dataset(path, schema: DatasetSchema | None = None,
                 cluster_order: Sequence[str] | None = None) -> LongFormatDataset:
    """Read a comma-separated long-format file with a header row.

    Rows missing a required field (cluster, period, outcome) are dropped and
    counted. Rows whose period or outcome cannot be parsed count as
    unparseable; more than ``schema.max_unparseable`` of them is an error.
    ``cluster_order`` fixes the cluster index order (normally the design's).
    """
    schema = schema or DatasetSchema()
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as e:
        raise DataError(f"cannot read {path}: {e.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        required = [schema.cluster, schema.period, schema.outcome]
        wanted = list(required) + ([schema.subject] if schema.subject else [])
        if schema.covariates is not None:
            wanted += list(schema.covariates)
        absent = [c for c in wanted if c not in header]
        if absent:
            raise ConfigError(f"{path.name}: columns {absent} not in header {header}")
        cov_names = (list(schema.covariates) if schema.covariates is not None
                     else [c for c in header if c not in wanted])
        cl, per, y, sub = [], [], [], []
        cov: dict[str, list[str]] = {c: [] for c in cov_names}
        dropped, bad = 0, []
        for lineno, row in enumerate(reader, start=2):
            if any(_is_missing(row.get(c)) for c in required):
                dropped += 1
                continue
            try:
                p = float(row[schema.period])
                if p != int(p):
                    raise ValueError
                out = float(row[schema.outcome])
                if not math.isfinite(out):
                    raise ValueError
            except ValueError:
                bad.append(lineno)
                continue
            cl.append(row[schema.cluster].strip())
            per.append(int(p))
            y.append(out)
            if schema.subject:
                sub.append(row[schema.subject])
            for c in cov_names:
                cov[c].append(row[c])
    if len(bad) > schema.max_unparseable:
        raise DataError(f"{path.name}: {len(bad)} unparseable row(s) (non-numeric period or "
                        f"outcome), first at line {bad[0]}")
    if bad:
        warnings.warn(f"{path.name}: skipped {len(bad)} unparseable row(s)", RuntimeWarning,
                      stacklevel=2)
    if dropped:
        warnings.warn(f"{path.name}: dropped {dropped} row(s) with missing required fields",
                      RuntimeWarning, stacklevel=2)
    if not y:
        raise DataError(f"{path.name}: no usable rows")
    covs = {}
    for c, vals in cov.items():
        if any(_is_missing(v) for v in vals):
            raise DataError(f"{path.name}: covariate {c!r} has missing values")
        covs[c] = _convert_column(vals)
    ids = list(cluster_order) if cluster_order is not None else sorted(set(cl))
    return LongFormatDataset.from_arrays(np.array(cl, dtype=object), per, y, covs,
                                         sub or None, cluster_ids=ids,
                                         n_dropped=dropped + len(bad))


def write_dataset(path, data: LongFormatDataset, schema: DatasetSchema | None = None) -> None:
    """Write long-format CSV with round-trip float formatting."""
    schema = schema or DatasetSchema()
    names = list(data.covariates)
    cols = [schema.cluster, schema.period, schema.outcome] + names
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(data.n_obs):
            row = [data.cluster_ids[data.cluster[k]], int(data.period[k]),
                   repr(float(data.outcome[k]))]
            for c in names:
                v = data.covariates[c][k]
                row.append(repr(float(v)) if isinstance(v, (float, np.floating)) else v)
            w.writerow(row)


# --------------------------------------------------------------------------
# Design and config files
# --------------------------------------------------------------------------

def _load_toml(path, kind: str, error=ConfigError) -> dict:
    try:
        with Path(path).open("rb") as fh:
            return tomllib.load(fh)
    except OSError as e:
        raise error(f"cannot read {kind} file {path}: {e.strerror}") from None
    except tomllib.TOMLDecodeError as e:
        raise error(f"{kind} file {path}: {e}") from None


@dataclass(frozen=True)
class DesignFile:
    layout: TrialLayout
    cluster_ids: tuple[str, ...]
    has_sizes: bool


def parse_design(doc: Mapping[str, Any]) -> DesignFile:
    try:
        T = int(doc["n_periods"])
        cl = doc["clusters"]
        ids = tuple(str(c) for c in cl["ids"])
        crossover = [int(r) for r in cl["crossover"]]
    except KeyError as e:
        raise DesignError(f"design file lacks {e.args[0]!r}") from None
    if len(ids) != len(crossover):
        raise DesignError("clusters.ids and clusters.crossover differ in length")
    if len(set(ids)) != len(ids):
        raise DesignError("duplicate cluster ids in design")
    N = int(doc.get("n_clusters", len(ids)))
    if N != len(ids):
        raise DesignError(f"n_clusters = {N} but {len(ids)} cluster ids listed")
    seqs = doc.get("sequences")
    if seqs is None:
        seqs = sorted(set(crossover))
    alloc = doc.get("allocation")
    if alloc is None:
        alloc = [crossover.count(int(r)) for r in seqs]
    sizes = cl.get("sizes")
    layout = build_layout(N, T, seqs, alloc, sizes, crossover)
    return DesignFile(layout, ids, sizes is not None)


def read_design(path) -> DesignFile:
    return parse_design(_load_toml(path, "design", DesignError))


def write_design(path, layout: TrialLayout, cluster_ids: Sequence[str],
                 include_sizes: bool = True) -> None:
    lines = [f"n_clusters = {layout.n_clusters}", f"n_periods = {layout.n_periods}",
             f"sequences = {list(layout.sequences)}", f"allocation = {list(layout.allocation)}",
             "", "[clusters]", "ids = [" + ", ".join(json.dumps(str(c)) for c in cluster_ids) + "]",
             f"crossover = {list(layout.observed_crossover)}"]
    if include_sizes:
        lines.append("sizes = [")
        lines += [f"  {row.tolist()}," for row in layout.cluster_sizes]
        lines.append("]")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class RunConfig:
    analysis: AnalysisConfig
    data: DatasetSchema = field(default_factory=DatasetSchema)
    simulation: Mapping[str, Any] = field(default_factory=dict)


_TOP = {"effect", "working_mean", "working_corr", "estimator", "working_params", "custom",
        "modifiers", "adjust", "inference", "data", "simulation"}


def parse_config(doc: Mapping[str, Any]) -> RunConfig:
    unknown = set(doc) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw: dict[str, Any] = {k: doc[k] for k in ("effect", "working_mean", "working_corr",
                                             "estimator") if k in doc}
    if "working_params" in doc:
        kw["corr_params"] = {k: float(v) for k, v in doc["working_params"].items()}
    if "custom" in doc:
        kw["custom_basis"] = dict(doc["custom"].get("basis", {}))
        if "names" in doc["custom"]:
            kw["custom_names"] = tuple(doc["custom"]["names"])
    mods = doc.get("modifiers", {})
    if mods:
        kw["modifiers"] = tuple(mods.get("columns", ()))
        if "encoding" in mods:
            kw["modifier_encoding"] = mods["encoding"]
    adj = doc.get("adjust", {})
    for src, dst in (("design", "adjust_design"), ("threshold", "strata_threshold"),
                     ("centering", "centering")):
        if src in adj:
            kw[dst] = adj[src]
    inf = doc.get("inference", {})
    for k in ("level", "quantile", "loo_distribution", "loo_refit", "variance_method"):
        if k in inf:
            kw[k] = inf[k]
    try:
        analysis = AnalysisConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return RunConfig(analysis, DatasetSchema.from_mapping(doc.get("data", {})),
                     dict(doc.get("simulation", {})))


def read_config(path) -> RunConfig:
    return parse_config(_load_toml(path, "config"))


# --------------------------------------------------------------------------
# Analysis and reports
# --------------------------------------------------------------------------

def analyze(data: LongFormatDataset | str | Path, design: DesignFile | str | Path,
            config: RunConfig | AnalysisConfig | str | Path | None = None) -> AnalysisResult:
    """Run the full pipeline on a dataset described by a design file."""
    if isinstance(config, (str, Path)):
        config = read_config(config)
    elif config is None:
        config = RunConfig(AnalysisConfig())
    elif isinstance(config, AnalysisConfig):
        config = RunConfig(config)
    if not isinstance(design, DesignFile):
        design = read_design(design)
    if not isinstance(data, LongFormatDataset):
        data = read_dataset(data, config.data, cluster_order=design.cluster_ids)
    elif tuple(data.cluster_ids) != design.cluster_ids:
        raise DataError("dataset cluster order differs from the design")
    layout = design.layout
    sizes = data.sizes(layout.n_periods)
    if np.any(sizes == 0):
        i, j = np.argwhere(sizes == 0)[0]
        raise DataError(f"cluster {design.cluster_ids[i]} has no rows in period {j + 1}")
    if design.has_sizes:
        if not np.array_equal(sizes, layout.cluster_sizes):
            i, j = np.argwhere(sizes != layout.cluster_sizes)[0]
            raise DataError(f"cluster {design.cluster_ids[i]} period {j + 1}: {sizes[i, j]} rows "
                            f"but the design declares {layout.cluster_sizes[i, j]}")
    else:
        layout = build_layout(layout.n_clusters, layout.n_periods, layout.sequences,
                              layout.allocation, sizes, layout.observed_crossover)
    return fit_trial(data, layout, config.analysis)


_num = {"type": ["number", "null"]}
_vec = {"type": "array", "items": _num}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "stepped wedge analysis report",
    "type": "object",
    "required": ["estimator", "columns", "delta", "se_plugin", "se_loo", "ci_plugin",
                 "ci_loo", "level", "cross_term_share", "working_models", "loo_table",
                 "diagnostics"],
    "properties": {
        "estimator": {"type": "string"},
        "columns": {"type": "array", "items": {"type": "string"}},
        "delta": _vec,
        "se_plugin": {"anyOf": [_vec, {"type": "null"}]},
        "se_loo": {"anyOf": [_vec, {"type": "null"}]},
        "ci_plugin": {"anyOf": [{"type": "array", "items": _vec}, {"type": "null"}]},
        "ci_loo": {"anyOf": [{"type": "array", "items": _vec}, {"type": "null"}]},
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "cross_term_share": {"anyOf": [_vec, {"type": "null"}]},
        "working_models": {"type": "object"},
        "loo_table": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["cluster", "crossover", "size", "delta_loo"],
                "properties": {
                    "cluster": {"type": "string"},
                    "crossover": {"type": "integer"},
                    "baseline_size": {"type": "integer"},
                    "size": {"type": "integer"},
                    "delta_loo": _vec,
                    "deviation": _vec,
                },
            },
        },
        "diagnostics": {"type": "array", "items": {"type": "string"}},
    },
}


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        return float(x) if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def report_dict(result: AnalysisResult) -> dict:
    est = result.estimation
    vp, vl = result.variance_plugin, result.variance_loo
    doc = {
        "estimator": est.meta.get("estimator", ""),
        "columns": list(est.column_names),
        "delta": est.delta_hat,
        "se_plugin": None if vp is None else vp.se,
        "se_loo": None if vl is None else vl.se,
        "ci_plugin": None if result.ci_plugin is None else result.ci_plugin.as_pairs(),
        "ci_loo": None if result.ci_loo is None else result.ci_loo.as_pairs(),
        "level": result.config.level,
        "cross_term_share": None if vp is None else vp.cross_term_share,
        "working_models": {k: v for k, v in est.meta.items() if k != "estimator"},
        "loo_table": result.loo_table,
        "diagnostics": list(result.diagnostics),
    }
    doc = _clean(doc)
    jsonschema.validate(doc, REPORT_SCHEMA)
    return doc


def format_text(doc: Mapping[str, Any]) -> str:
    """Aligned estimate / SE / CI table, one row per effect column."""
    pct = int(round(100 * doc["level"]))
    head = ["Effect", "Estimate", "SE (perm.)", f"{pct}% CI (perm.)", "SE (L1O)", f"{pct}% CI (L1O)"]
    rows = []
    f = lambda v: "NA" if v is None else f"{v:.4f}"
    ci = lambda p: "NA" if p is None or p[0] is None else f"({p[0]:.4f}, {p[1]:.4f})"
    for k, name in enumerate(doc["columns"]):
        sp = doc["se_plugin"][k] if doc["se_plugin"] else None
        sl = doc["se_loo"][k] if doc["se_loo"] else None
        cp = doc["ci_plugin"][k] if doc["ci_plugin"] else None
        cl = doc["ci_loo"][k] if doc["ci_loo"] else None
        rows.append([name, f(doc["delta"][k]), f(sp), ci(cp), f(sl), ci(cl)])
    widths = [max(len(r[c]) for r in rows + [head]) for c in range(len(head))]
    line = lambda r: "  ".join(s.ljust(w) if c == 0 else s.rjust(w)
                               for c, (s, w) in enumerate(zip(r, widths)))
    out = [line(head), "-" * len(line(head))] + [line(r) for r in rows]
    wm = doc["working_models"]
    out += ["", f"estimator: {doc['estimator']}   working mean: {wm.get('working_mean')}   "
                f"working correlation: {wm.get('working_corr')}"]
    if doc["loo_table"]:
        out += ["", "Leave-one-out influence (ordered by crossover)",
                f"{'cluster':>10} {'crossover':>9} {'size':>6} {'delta_-i':>10}"]
        for r in doc["loo_table"]:
            d = r["delta_loo"][0]
            out.append(f"{r['cluster']:>10} {r['crossover']:>9} {r['size']:>6} {f(d):>10}")
    if doc["diagnostics"]:
        out += ["", "Diagnostics:"] + [f"  - {d}" for d in doc["diagnostics"]]
    return "\n".join(out) + "\n"


def emit_report(result: AnalysisResult | Mapping, fmt: str = "machine", path=None) -> str:
    """Render a report as ``machine`` (JSON) or ``text``; write it if ``path`` is given."""
    doc = report_dict(result) if isinstance(result, AnalysisResult) else dict(result)
    if fmt == "machine":
        jsonschema.validate(doc, REPORT_SCHEMA)
        body = json.dumps(doc, indent=2) + "\n"
    elif fmt == "text":
        body = format_text(doc)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    if path is not None:
        try:
            Path(path).write_text(body)
        except OSError as e:
            raise DataError(f"cannot write report to {path}: {e.strerror}") from None
    return body


def read_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    jsonschema.validate(doc, REPORT_SCHEMA)
    return doc


def write_loo_csv(path, table: Sequence[Mapping[str, Any]]) -> None:
    """Plot-ready leave-one-out influence columns."""
    if not table:
        return
    d = len(table[0]["delta_loo"])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster", "crossover", "baseline_size", "size"]
                   + [f"delta_loo_{k}" for k in range(d)] + [f"deviation_{k}" for k in range(d)])
        for r in table:
            w.writerow([r["cluster"], r["crossover"], r.get("baseline_size", ""), r["size"]]
                       + [repr(float(v)) for v in r["delta_loo"]]
                       + [repr(float(v)) for v in r["deviation"]])


def write_rows_csv(path, rows: Sequence[Mapping[str, Any]]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = list(dict.fromkeys(k for r in rows for k in r))
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
