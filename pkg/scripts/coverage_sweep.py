"""Coverage of C-EMEE and EMEE as the cluster size grows with the total
sample fixed, and as the SD of the treatment-interacting cluster effect grows.

Writes one CSV per sweep for external plotting.

    python scripts/coverage_sweep.py --R 500 --out results/sweeps
"""

import argparse
import dataclasses
import os
from pathlib import Path

from cemee.replication import ExperimentPlan, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="II")
    ap.add_argument("--R", type=int, default=500)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--jobs", type=int, default=os.cpu_count())
    ap.add_argument("--total", type=int, default=500, help="individuals per replicate in the G sweep")
    ap.add_argument("--sizes", type=int, nargs="+", default=[2, 5, 10, 20, 25, 50])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    ap.add_argument("--sigma-cell", type=int, nargs=2, default=[50, 10], metavar=("M", "G"))
    ap.add_argument("--out", default="results/sweeps")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["estimator", "truth", "n", "bias", "se", "emp_sd", "cp", "cp_mcse"]
    base = ExperimentPlan(args.scenario, R=args.R, seed=args.seed)

    grid = tuple({"M": args.total // g, "G": g} for g in args.sizes)
    sizes = run_experiment(dataclasses.replace(base, grid=grid), jobs=args.jobs).table()
    sizes[["M", "G"] + cols].to_csv(out / "coverage_by_cluster_size.csv", index=False, float_format="%.6g")
    print(sizes[["M", "G", "estimator", "cp"]].to_string(index=False))

    M, G = args.sigma_cell
    grid = tuple({"M": M, "G": G, "sigma": s} for s in args.sigmas)
    sig = run_experiment(dataclasses.replace(base, grid=grid, seed=args.seed + 1), jobs=args.jobs).table()
    sig[["sigma"] + cols].to_csv(out / "coverage_by_sigma.csv", index=False, float_format="%.6g")
    print(sig[["sigma", "estimator", "cp"]].to_string(index=False))


if __name__ == "__main__":
    main()
