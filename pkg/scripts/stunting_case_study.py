"""Nested stunting regressions, repeated subsampling and a power calculation on planted records."""

import argparse

import pandas as pd

from satecon.econ import (VILLAGE_SPEC, PowerSpec, format_table, power_sample_size, repeated_sampling, run_specs,
                          synth_records)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--records", default="", help="CSV of records; planted records when empty")
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--sample-size", type=int, default=3500)
    ap.add_argument("--runs", type=int, default=100)
    args = ap.parse_args()
    df = pd.read_csv(args.records) if args.records else synth_records(args.n, seed=args.seed)
    print(format_table(run_specs(df)))
    mc = repeated_sampling(df, VILLAGE_SPEC, args.sample_size, args.runs, seed=3)
    print(f"{'variable':<24}{'+1%':>5}{'-1%':>5}{'+5%':>5}{'-5%':>5}{'+10%':>5}{'-10%':>5}")
    for i, name in enumerate(mc.names):
        cells = [f"{d[lv][i]:>5}" for lv in (0.01, 0.05, 0.10) for d in (mc.positive, mc.negative)]
        print(f"{name:<24}" + "".join(cells))
    if mc.failed:
        print(f"{len(mc.failed)} runs failed")
    for f2 in (0.02, 0.15, 0.35):
        n = power_sample_size(PowerSpec(f2, power=0.95, predictors=len(VILLAGE_SPEC.regressors)))
        print(f"f2={f2}: N={n} for power 0.95 at alpha 0.05")


if __name__ == "__main__":
    main()
