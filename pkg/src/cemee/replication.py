"""Seeded Monte Carlo experiments: generate, fit, infer, summarize."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .estimators import ESTIMATORS, EstimationError, EstimatorOptions, fit
from .linalg import SingularMatrixError
from .simulate import ScenarioConfig, SimulationError, generate_scenario, true_marginal_effect
from .variance import InferenceError, covariance, t_critical
from .weights import WeightError

log = logging.getLogger(__name__)

# (clusters, cluster size) cells used by the simulation tables
TABLE_CELLS = ({"M": 25, "G": 5}, {"M": 25, "G": 10}, {"M": 50, "G": 10}, {"M": 50, "G": 20}, {"M": 100, "G": 20}, {"M": 100, "G": 25})

CELL_KEYS = {f.name for f in dataclasses.fields(ScenarioConfig)} - {"scenario", "seed", "overflow"}


class ReplicationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentPlan:
    """A grid of simulation cells, each run for ``R`` replicates.

    Grid entries override ScenarioConfig fields (M, G, T, sigma, ...). Every
    estimator is fitted on each replicate under each reference policy in
    ``policies``; ``delta`` defaults to 2 for LAG scenarios and 1 otherwise.
    """

    scenario: str
    grid: tuple = ({},)
    estimators: tuple = ("cemee", "emee")
    R: int = 500
    xi: float = 0.05
    seed: int = 0
    policies: tuple = ("otd",)
    delta: int | None = None
    moderator: tuple = ("intercept",)
    control: tuple = ("intercept", "Z")
    overflow: str = "clip"
    small_sample: bool | str = "auto"
    truth_draws: int | None = None  # None: exact enumeration

    def __post_init__(self):
        if self.R < 2:
            raise ReplicationError("R must be >= 2")
        if not self.grid:
            raise ReplicationError("empty grid")
        object.__setattr__(self, "grid", tuple(dict(c) for c in self.grid))
        for cell in self.grid:
            unknown = set(cell) - CELL_KEYS
            if unknown:
                raise ReplicationError(f"unknown grid keys: {sorted(unknown)}")
        for est in self.estimators:
            if est not in ESTIMATORS:
                raise ReplicationError(f"unknown estimator {est!r}")
        for key in ("estimators", "policies", "moderator", "control"):
            object.__setattr__(self, key, tuple(getattr(self, key)))
        self.config(0, 0)  # validates the scenario and overrides

    @property
    def lag(self) -> int:
        if self.delta is not None:
            return self.delta
        return 2 if self.scenario.startswith("LAG") else 1

    def replicate_seed(self, cell: int, r: int) -> int:
        ss = np.random.SeedSequence(self.seed, spawn_key=(cell, r))
        lo, hi = ss.generate_state(2, np.uint32)
        return int(hi) << 32 | int(lo)

    def config(self, cell: int, r: int) -> ScenarioConfig:
        return ScenarioConfig(
            self.scenario, seed=self.replicate_seed(cell, r), overflow=self.overflow, **self.grid[cell]
        )

    def fits(self):
        """(estimator, policy) pairs fitted on each replicate."""
        return [(ESTIMATORS[e], p) for e in self.estimators for p in self.policies]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ReplicationError(f"unknown plan keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Summary:
    n: int
    bias: float
    se: float
    emp_sd: float
    rmse: float
    cp: float
    cp_mcse: float


def summarize(estimates, ses, ci_hits, truth: float) -> Summary:
    """Bias, mean reported SE, empirical SD, RMSE and coverage against truth."""
    est = np.asarray(estimates, dtype=float)
    ses = np.asarray(ses, dtype=float)
    hits = np.asarray(ci_hits, dtype=float)
    if est.size == 0:
        raise ReplicationError("no replicates to summarize")
    if not (est.size == ses.size == hits.size):
        raise ReplicationError("estimates, SEs and coverage indicators differ in length")
    err = est - truth
    cp = float(hits.mean())
    return Summary(
        n=int(est.size),
        bias=math.fsum(err) / est.size,
        se=math.fsum(ses) / est.size,
        emp_sd=float(est.std(ddof=1)) if est.size > 1 else 0.0,
        rmse=math.sqrt(math.fsum(err**2) / est.size),
        cp=cp,
        cp_mcse=math.sqrt(cp * (1 - cp) / est.size),
    )


@dataclass
class CellResult:
    cell: int
    params: dict
    estimator: str
    policy: str
    truth: float
    estimates: list = field(default_factory=list)
    ses: list = field(default_factory=list)
    hits: list = field(default_factory=list)
    replicate: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    @property
    def summary(self) -> Summary:
        return summarize(self.estimates, self.ses, self.hits, self.truth)

    def to_dict(self) -> dict:
        out = {
            "cell": self.cell,
            "params": self.params,
            "estimator": self.estimator,
            "policy": self.policy,
            "truth": self.truth,
            "failures": dict(sorted(self.failures.items())),
            "n_failed": sum(self.failures.values()),
            "replicate": self.replicate,
            "estimates": self.estimates,
            "ses": self.ses,
            "hits": self.hits,
        }
        if self.estimates:
            out["summary"] = dataclasses.asdict(self.summary)
        return out


@dataclass
class ReplicationReport:
    plan: ExperimentPlan
    cells: list[CellResult]

    def get(self, cell: int = 0, estimator: str = "cemee", policy: str = "otd") -> CellResult:
        for c in self.cells:
            if c.cell == cell and c.estimator == ESTIMATORS[estimator] and c.policy == policy:
                return c
        raise KeyError((cell, estimator, policy))

    def to_dict(self) -> dict:
        return {"plan": self.plan.to_dict(), "cells": [c.to_dict() for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> pd.DataFrame:
        """One row per (cell, estimator, policy), Table-1 style."""
        rows = []
        for c in self.cells:
            row = {"scenario": self.plan.scenario, **c.params, "estimator": c.estimator, "policy": c.policy, "truth": c.truth}
            if c.estimates:
                row.update(dataclasses.asdict(c.summary))
            row["n_failed"] = sum(c.failures.values())
            rows.append(row)
        return pd.DataFrame(rows)

    def write(self, out: str | Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json())
        self.table().to_csv(out / "table.csv", index=False, float_format="%.17g")


# --------------------------------------------------------------------------
# execution


def _run_replicate(plan: ExperimentPlan, cell: int, r: int) -> list:
    """Per (estimator, policy): (estimate, se, lo, hi) or ("fail", reason)."""
    try:
        panel = generate_scenario(plan.config(cell, r))
    except SimulationError as exc:
        return [("fail", f"simulation: {type(exc).__name__}")] * len(plan.fits())
    out = []
    for est, policy in plan.fits():
        options = EstimatorOptions(estimator=est, delta=plan.lag, policy=policy)
        try:
            res = fit(panel, plan.moderator, plan.control, options)
            cov = covariance(res, plan.small_sample)
            crit = t_critical(cov.df, plan.xi)
            b, se = float(res.beta[0]), float(cov.beta_se[0])
            out.append((b, se, b - crit * se, b + crit * se))
        except (EstimationError, InferenceError, SingularMatrixError, WeightError) as exc:
            reason = "non-convergence" if "converge" in str(exc) else type(exc).__name__
            out.append(("fail", reason))
    return out


def _run_chunk(args):
    plan, tasks = args
    return [_run_replicate(plan, c, r) for c, r in tasks]


def truths(plan: ExperimentPlan) -> dict:
    out = {}
    for cell in range(len(plan.grid)):
        cfg = plan.config(cell, 0)
        for est, policy in plan.fits():
            estimand = "indirect" if est == "indirect" else "direct"
            out[cell, est, policy] = true_marginal_effect(cfg, policy, estimand, plan.truth_draws)
    return out


def run_experiment(plan: ExperimentPlan, jobs: int = 1) -> ReplicationReport:
    """Run every replicate of every cell. Results do not depend on ``jobs``."""
    tasks = [(c, r) for c in range(len(plan.grid)) for r in range(plan.R)]
    if jobs <= 1:
        results = [_run_replicate(plan, c, r) for c, r in tasks]
    else:
        n_chunks = min(len(tasks), jobs * 4)
        chunks = [tasks[i::n_chunks] for i in range(n_chunks)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, [(plan, ch) for ch in chunks]))
        by_task = {}
        for ch, res in zip(chunks, parts):
            by_task.update(zip(ch, res))
        results = [by_task[t] for t in tasks]

    truth = truths(plan)
    cells = {
        (c, est, pol): CellResult(c, dict(plan.grid[c]), est, pol, truth[c, est, pol])
        for c in range(len(plan.grid))
        for est, pol in plan.fits()
    }
    for (c, r), per_fit in zip(tasks, results):
        for (est, pol), res in zip(plan.fits(), per_fit):
            cr = cells[c, est, pol]
            if res[0] == "fail":
                cr.failures[res[1]] = cr.failures.get(res[1], 0) + 1
                continue
            b, se, lo, hi = res
            cr.replicate.append(r)
            cr.estimates.append(b)
            cr.ses.append(se)
            cr.hits.append(int(lo <= cr.truth <= hi))
    for cr in cells.values():
        n_fail = sum(cr.failures.values())
        if n_fail:
            log.warning("cell %d %s/%s: %d of %d replicates failed %s", cr.cell, cr.estimator, cr.policy, n_fail, plan.R, cr.failures)
        if not cr.estimates:
            raise ReplicationError(f"all replicates failed for cell {cr.cell} ({cr.estimator}, {cr.policy})")
    return ReplicationReport(plan, list(cells.values()))


def coverage_sweep(plan: ExperimentPlan, parameter: str, values, jobs: int = 1) -> pd.DataFrame:
    """Coverage of each estimator along one grid parameter (e.g. G or sigma)."""
    if parameter not in CELL_KEYS:
        raise ReplicationError(f"cannot sweep {parameter!r}")
    base = dict(plan.grid[0]) if len(plan.grid) == 1 else {}
    grid = tuple({**base, parameter: v} for v in values)
    report = run_experiment(dataclasses.replace(plan, grid=grid), jobs)
    table = report.table()
    return table[[parameter, "estimator", "policy", "truth", "n", "bias", "se", "cp", "cp_mcse"]]
