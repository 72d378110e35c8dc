"""Indirect-effect simulation table (Scenario IV).

    python scripts/table2.py --R 1000 --out results/table2
"""

import argparse
import os

from cemee.replication import TABLE_CELLS, ExperimentPlan, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--R", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=4)
    ap.add_argument("--jobs", type=int, default=os.cpu_count())
    ap.add_argument("--out", default="results/table2")
    args = ap.parse_args()

    plan = ExperimentPlan("IV", TABLE_CELLS, ("indirect",), R=args.R, seed=args.seed)
    report = run_experiment(plan, jobs=args.jobs)
    report.write(args.out)
    print(report.table()[["M", "G", "truth", "bias", "se", "rmse", "cp", "n_failed"]].to_string(index=False))


if __name__ == "__main__":
    main()
