"""Direct-effect simulation table: C-EMEE vs EMEE for Scenarios I-III.

    python scripts/table1.py --R 1000 --jobs 8 --out results/table1
"""

import argparse
import os
from pathlib import Path

import pandas as pd

from cemee.replication import TABLE_CELLS, ExperimentPlan, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenarios", nargs="+", default=["I", "II", "III"])
    ap.add_argument("--R", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--jobs", type=int, default=os.cpu_count())
    ap.add_argument("--out", default="results/table1")
    args = ap.parse_args()

    out = Path(args.out)
    tables = []
    for k, scenario in enumerate(args.scenarios):
        plan = ExperimentPlan(scenario, TABLE_CELLS, ("cemee", "emee"), R=args.R, seed=args.seed + k)
        report = run_experiment(plan, jobs=args.jobs)
        report.write(out / scenario)
        tables.append(report.table())
        print(tables[-1][["scenario", "estimator", "M", "G", "bias", "se", "rmse", "cp"]].to_string(index=False))
    pd.concat(tables).to_csv(out / "table1.csv", index=False, float_format="%.6g")


if __name__ == "__main__":
    main()
