"""Shared bits for the experiment scripts."""

import argparse
import warnings

from swrobust.io import write_rows_csv
from swrobust.simharness import DgpSpec, run_study

COLUMNS = ("config", "estimator", "n_reps", "fail", "bias", "sd", "coverage_plugin",
           "coverage_loo", "mean_se_plugin", "mean_se_loo")


def study_parser(description, configs):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=DgpSpec.seed)
    p.add_argument("--configs", default=configs, help="config labels, e.g. 'ab'")
    p.add_argument("--strata", default="levels",
                   help="stratification threshold for the adjusted configs: 'levels', "
                        "'median' or a number")
    p.add_argument("--out", help="summary CSV")
    p.add_argument("--raw", help="per-replicate CSV")
    return p


def strata_arg(s):
    try:
        return float(s)
    except ValueError:
        return s


def run_and_report(setting, args):
    spec = DgpSpec(setting=setting, seed=args.seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = run_study(spec, list(args.configs), args.reps, ("proposed", "gee"),
                        strata_threshold=strata_arg(args.strata))
    print(f"setting {setting}, {args.reps} replicates, seed {args.seed}")
    print("  ".join(f"{c:>15}" for c in COLUMNS))
    for row in res.summary:
        cells = []
        for c in COLUMNS:
            v = row.get(c, "")
            cells.append(f"{v:15.3f}" if isinstance(v, float) else f"{v!s:>15}")
        print("  ".join(cells))
    if args.out:
        write_rows_csv(args.out, res.summary)
    if args.raw:
        write_rows_csv(args.raw, res.raw)
    return res
