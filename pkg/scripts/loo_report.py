"""Analyze one simulated replicate and print its leave-one-out influence table."""

import argparse

from swrobust.io import emit_report, write_loo_csv
from swrobust.pipeline import fit_trial
from swrobust.simharness import DgpSpec, generate, model_config

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--setting", type=int, default=1, choices=(1, 2))
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--config", default="d")
    p.add_argument("--out", help="optional CSV for the influence table")
    args = p.parse_args()

    sim = generate(DgpSpec(setting=args.setting), args.replicate)
    fit = fit_trial(sim.data, sim.layout, model_config(args.config))
    print(emit_report(fit, "text"))
    print(f"{'cluster':>8} {'crossover':>9} {'size':>6} {'delta_loo':>10} {'deviation':>10}")
    for r in sorted(fit.loo_table, key=lambda r: -abs(r["deviation"][0])):
        print(f"{r['cluster']:>8} {r['crossover']:>9} {r['size']:>6} "
              f"{r['delta_loo'][0]:10.4f} {r['deviation'][0]:+10.4f}")
    if args.out:
        write_loo_csv(args.out, fit.loo_table)
