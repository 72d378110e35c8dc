"""Cluster-based estimators of marginal excursion effects for binary outcomes
in micro-randomized trials."""

__version__ = "0.1.0"

from .estimators import (
    EstimationError,
    EstimatorOptions,
    FitResult,
    estimating_function_direct,
    estimating_function_indirect,
    fit,
    fit_direct,
    fit_emee,
    fit_indirect,
)
from .panel import ClusterPanel, FeatureSpec, PanelError, build_design, load_panel, validate_panel, write_panel
from .replication import ExperimentPlan, ReplicationReport, coverage_sweep, run_experiment, summarize
from .simulate import ScenarioConfig, generate_scenario, true_marginal_effect
from .variance import CovarianceResult, covariance, infer, moderation_curve, sandwich, small_sample_correct
from .weights import NumeratorSpec, ReferencePolicy

__all__ = [
    "ClusterPanel",
    "CovarianceResult",
    "EstimationError",
    "EstimatorOptions",
    "ExperimentPlan",
    "FeatureSpec",
    "FitResult",
    "NumeratorSpec",
    "PanelError",
    "ReferencePolicy",
    "ReplicationReport",
    "ScenarioConfig",
    "build_design",
    "covariance",
    "coverage_sweep",
    "estimating_function_direct",
    "estimating_function_indirect",
    "fit",
    "fit_direct",
    "fit_emee",
    "fit_indirect",
    "generate_scenario",
    "infer",
    "load_panel",
    "moderation_curve",
    "run_experiment",
    "sandwich",
    "small_sample_correct",
    "summarize",
    "true_marginal_effect",
    "validate_panel",
    "write_panel",
]
