"""Batch command line: simulate, fit, replicate, moderation-curve, validate.

Exit codes: 0 success, 1 usage or schema error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .estimators import EstimationError, EstimatorOptions, fit
from .linalg import SingularMatrixError
from .panel import PanelError, load_panel, validate_panel, write_panel
from .replication import ExperimentPlan, ReplicationError, run_experiment
from .simulate import ScenarioConfig, SimulationError, generate_scenario, true_marginal_effect
from .variance import InferenceError, covariance, curve_frame, infer, moderation_curve
from .weights import WeightError

log = logging.getLogger("cemee")

CONFIG_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

FIT_KEYS = {
    "version",
    "data",
    "schema",
    "estimator",
    "moderator",
    "control",
    "delta",
    "policy",
    "numerator",
    "outcome",
    "xi",
    "contrasts",
    "small_sample",
    "grid",
    "tol",
    "max_iter",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise UsageError(f"unsupported config version {version}")
    return data, p.parent


def _seed(args, config: dict) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CEMEE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"CEMEE_SEED must be an integer, got {env!r}") from exc
    return config.get("seed")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    config, _ = _read_config(args.config)
    seed = _seed(args, config)
    if seed is not None:
        config["seed"] = seed
    cfg = ScenarioConfig.from_dict(config)
    panel = generate_scenario(cfg, jobs=args.jobs)
    out = _out_dir(args)
    write_panel(panel, out / "panel.csv")
    manifest = {"config": cfg.to_dict(), "seed": cfg.seed, "version": __version__}
    manifest["truth"] = true_marginal_effect(cfg)
    if cfg.is_lag:
        manifest["truth_by_policy"] = {p: true_marginal_effect(cfg, p) for p in ("otd", "st")}
    if cfg.scenario == "IV":
        manifest["truth_direct"] = true_marginal_effect(cfg, estimand="direct")
    _dump(out / "manifest.json", manifest)
    print(f"wrote {panel.n_rows} rows to {out / 'panel.csv'}; truth {manifest['truth']:.6f}")
    return EXIT_OK


def _fit_setup(args):
    config, base = _read_config(args.config)
    unknown = set(config) - FIT_KEYS
    if unknown:
        raise UsageError(f"unknown fit config keys: {sorted(unknown)}")
    data = args.data or config.get("data")
    if data is None:
        raise UsageError("no panel given (--data or config 'data')")
    data = Path(data) if args.data else base / data
    schema = config.get("schema")
    if isinstance(schema, str):
        schema = base / schema
    panel = load_panel(data, schema)
    options = EstimatorOptions(
        estimator=config.get("estimator", "cemee"),
        delta=config.get("delta", 1),
        policy=config.get("policy", "otd"),
        numerator=config.get("numerator", "empirical"),
        outcome=config.get("outcome", "shifted-proximal"),
        tol=config.get("tol", 1e-10),
        max_iter=config.get("max_iter", 100),
    )
    result = fit(panel, config.get("moderator", ["intercept"]), config.get("control", ["intercept"]), options)
    small = config.get("small_sample", "auto")
    if args.no_small_sample_correction:
        small = False
    cov = covariance(result, small)
    return config, result, cov


def cmd_fit(args) -> int:
    config, result, cov = _fit_setup(args)
    xi = config.get("xi", 0.05)
    summary = infer(result, cov, [np.asarray(c, float) for c in config.get("contrasts", [])], xi)
    out = _out_dir(args)
    summary.write_csv(out / "coefficients.csv")
    report = {
        "fit": result.to_dict(),
        "inference": summary.to_dict(),
        "covariance": {"theta": cov.cov.tolist(), "df": cov.df, "corrected": cov.corrected},
        "version": __version__,
    }
    _dump(out / "fit.json", report)
    print(summary.to_frame().to_string(index=False))
    return EXIT_OK


def cmd_moderation_curve(args) -> int:
    config, result, cov = _fit_setup(args)
    grid = config.get("grid")
    if grid is None:
        raise UsageError("moderation-curve needs a 'grid' list or {start, stop, step}")
    if isinstance(grid, dict):
        start, stop, step = grid["start"], grid["stop"], grid["step"]
        n = int(round((stop - start) / step)) + 1
        grid = [start + i * step for i in range(n)]
    points = moderation_curve(result, cov, grid, config.get("xi", 0.05))
    out = _out_dir(args)
    frame = curve_frame(points).rename(columns={"lower": "lo", "upper": "hi"})
    frame.to_csv(out / "curve.csv", index=False, float_format="%.17g")
    print(frame.to_string(index=False))
    return EXIT_OK


def cmd_replicate(args) -> int:
    config, _ = _read_config(args.config)
    seed = _seed(args, config)
    if seed is not None:
        config["seed"] = seed
    if args.no_small_sample_correction:
        config["small_sample"] = False
    plan = ExperimentPlan.from_dict(config)
    report = run_experiment(plan, jobs=args.jobs)
    out = _out_dir(args)
    report.write(out)
    print(report.table().to_string(index=False))
    return EXIT_OK


def cmd_validate(args) -> int:
    config, base = _read_config(args.config)
    data = args.data or config.get("data")
    if data is None:
        raise UsageError("no panel given (--data or config 'data')")
    schema = config.get("schema")
    if isinstance(schema, str):
        schema = base / schema
    panel = load_panel(Path(data) if args.data else base / data, schema, validate=False)
    report = validate_panel(panel)
    if report.ok:
        print(f"ok: {panel.n_clusters} clusters, {panel.n_individuals} individuals, T={panel.T}")
        return EXIT_OK
    for v in report.violations:
        print(f"{v.kind}: {v.message}" + (f" (row {v.row})" if v.row is not None else ""))
    return EXIT_USAGE


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cemee", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=False):
        p.add_argument("--config", help="JSON config")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, help="overrides config seed and CEMEE_SEED")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
        p.add_argument("--no-small-sample-correction", action="store_true")
        if data:
            p.add_argument("--data", help="panel CSV (overrides config 'data')")
        return p

    common(sub.add_parser("simulate", help="generate a scenario panel")).set_defaults(func=cmd_simulate)
    common(sub.add_parser("fit", help="fit an estimator to a panel CSV"), True).set_defaults(func=cmd_fit)
    common(sub.add_parser("replicate", help="run a replication experiment")).set_defaults(func=cmd_replicate)
    common(sub.add_parser("moderation-curve", help="effect curve over a moderator grid"), True).set_defaults(
        func=cmd_moderation_curve
    )
    common(sub.add_parser("validate", help="check a panel CSV"), True).set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (EstimationError, SingularMatrixError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, SimulationError, PanelError, WeightError, ReplicationError, InferenceError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
