"""Command-line interface: ``analyze``, ``simulate`` and ``validate``.

Exit codes: 0 success, 2 usage, 3 configuration or design error,
4 data error, 5 numerical error.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DesignError, SteppedWedgeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 3, 4, 5


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, (ConfigError, DesignError)):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_NUMERICAL


def cmd_analyze(args) -> int:
    from .io import analyze, emit_report, read_config, read_dataset, read_design, write_loo_csv
    from .io import RunConfig
    from .pipeline import AnalysisConfig

    config = read_config(args.config) if args.config else RunConfig(AnalysisConfig())
    design = read_design(args.design)
    data = read_dataset(args.data, config.data, cluster_order=design.cluster_ids)
    result = analyze(data, design, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_report(result, "machine", out / "report.json")
    text = emit_report(result, "text", out / "report.txt")
    write_loo_csv(out / "loo_influence.csv", result.loo_table)
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .io import read_config, write_dataset, write_design, write_rows_csv
    from .simharness import DgpSpec, generate, run_study

    sim = read_config(args.config_file).simulation if args.config_file else {}
    setting = args.setting or int(sim.get("setting", 1))
    seed = args.seed if args.seed is not None else int(sim.get("seed", DgpSpec.seed))
    spec = DgpSpec(setting=setting, seed=seed)
    if args.export_replicate is not None:
        rep = generate(spec, args.export_replicate)
        d = Path(args.export_dir or ".")
        d.mkdir(parents=True, exist_ok=True)
        write_dataset(d / "data.csv", rep.data)
        write_design(d / "design.toml", rep.layout, rep.data.cluster_ids)
        print(f"wrote replicate {args.export_replicate} to {d}")
        return EXIT_OK
    configs = args.config_label or sim.get("configs") or (["a", "b", "c", "d"] if setting == 1
                                                         else ["e", "f", "g", "h"])
    configs = [c for group in configs for c in group.split(",")]
    estimators = args.estimators or sim.get("estimators", ["proposed", "gee"])
    reps = args.reps or int(sim.get("reps", 1000))
    threshold = sim.get("strata_threshold", "levels")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        study = run_study(spec, configs, reps, estimators, strata_threshold=threshold)
    if args.out:
        write_rows_csv(args.out, study.summary)
        if args.raw:
            write_rows_csv(args.raw, study.raw)
    cols = ["config", "estimator", "bias", "sd", "coverage_plugin", "coverage_loo", "fail"]
    print("  ".join(f"{c:>15}" for c in cols))
    for row in study.summary:
        vals = []
        for c in cols:
            v = row.get(c, "")
            vals.append(f"{v:>15.4f}" if isinstance(v, float) else f"{v!s:>15}")
        print("  ".join(vals))
    return EXIT_OK


def cmd_validate(args) -> int:
    from .io import read_config, read_design

    if not (args.design or args.config):
        raise ConfigError("validate needs --design and/or --config")
    if args.design:
        d = read_design(args.design)
        lay = d.layout
        print(f"design ok: {lay.n_clusters} clusters, {lay.n_periods} periods, "
              f"sequences {list(lay.sequences)} with allocation {list(lay.allocation)}")
    if args.config:
        c = read_config(args.config).analysis
        print(f"config ok: effect={c.effect} working_mean={c.working_mean} "
              f"working_corr={c.working_corr} adjust={c.adjust_design} estimator={c.estimator}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swrobust", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyze a long-format dataset")
    a.add_argument("--data", required=True)
    a.add_argument("--design", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("simulate", help="run a simulation study or export a replicate")
    s.add_argument("--setting", type=int, choices=(1, 2))
    s.add_argument("--config", dest="config_label", action="append",
                   help="model configuration a..h (repeatable or comma-separated)")
    s.add_argument("--config-file", help="TOML config with a [simulation] table")
    s.add_argument("--estimators", nargs="+", choices=("proposed", "gee"))
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="summary table CSV")
    s.add_argument("--raw", help="per-replicate results CSV")
    s.add_argument("--export-replicate", type=int, metavar="REP")
    s.add_argument("--export-dir")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("validate", help="check design and config files")
    v.add_argument("--design")
    v.add_argument("--config")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SteppedWedgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
