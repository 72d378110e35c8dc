"""Estimating equations for marginal excursion effects on binary outcomes.

All three estimators share one log-linear form. Each design row carries a
per-row scale (cluster averaging), an IPW weight, an effect indicator ``x``
and a centered treatment term, and contributes

    scale * weight * (Y exp(-x f'b) - exp(g'a)) * [g ; center * f]

to its scoring unit. For EMEE the unit is the individual with scale 1; for
the cluster-based direct estimator the unit is the cluster with scale 1/G_m;
for the pairwise indirect estimator rows are ordered pairs (j, j') within a
cluster with scale 1/(G_m (G_m - 1)), ``x = (1 - A_j) A_j'`` and
``center = (1 - A_j)(A_j' - p~*)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .linalg import SingularMatrixError, condition_number, solve_qr
from .panel import ClusterPanel, DesignRows, FeatureSpec, build_design
from .weights import NumeratorSpec, ReferencePolicy, lag_weights, marginal_weights, pair_numerator_prob

log = logging.getLogger(__name__)

ESTIMATORS = {
    "cemee": "cemee",
    "cemee-direct": "cemee",
    "direct": "cemee",
    "emee": "emee",
    "indirect": "indirect",
    "cemee-indirect": "indirect",
}


class EstimationError(RuntimeError):
    """Numerical failure: non-convergence, singular Jacobian, overflow."""


@dataclass(frozen=True)
class EstimatorOptions:
    estimator: str = "cemee"
    delta: int = 1
    policy: ReferencePolicy | str = "otd"
    numerator: NumeratorSpec | float | str = "empirical"
    outcome: str = "shifted-proximal"
    tol: float = 1e-10
    max_iter: int = 100
    damping: float = 0.5
    max_halvings: int = 10

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        object.__setattr__(self, "estimator", ESTIMATORS[self.estimator])
        object.__setattr__(self, "policy", ReferencePolicy.parse(self.policy))
        object.__setattr__(self, "numerator", NumeratorSpec.parse(self.numerator))
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")
        if not 0 < self.damping < 1:
            raise ValueError("damping must lie in (0, 1)")


@dataclass(frozen=True, eq=False)
class ScoreRows:
    """Row-level pieces of an estimating function, sorted by unit then block."""

    unit: np.ndarray
    block: np.ndarray
    scale: np.ndarray
    weight: np.ndarray
    x: np.ndarray
    center: np.ndarray
    Y: np.ndarray
    f: np.ndarray
    g: np.ndarray
    unit_ids: tuple
    block_ids: tuple
    skipped_clusters: int = 0

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def p(self) -> int:
        return self.g.shape[1]

    @property
    def q(self) -> int:
        return self.f.shape[1]

    @cached_property
    def h(self) -> np.ndarray:
        """[g ; center * f], fixed across Newton iterations."""
        return np.concatenate([self.g, self.center[:, None] * self.f], axis=1)

    @cached_property
    def c(self) -> np.ndarray:
        return self.scale * self.weight

    @cached_property
    def ch(self) -> np.ndarray:
        return self.c[:, None] * self.h

    @cached_property
    def unit_starts(self) -> np.ndarray:
        return np.flatnonzero(np.r_[True, self.unit[1:] != self.unit[:-1]])

    @cached_property
    def block_starts(self) -> np.ndarray:
        return np.flatnonzero(np.r_[True, self.block[1:] != self.block[:-1]])


@dataclass(frozen=True)
class ScoreContribution:
    unit_id: object
    U: np.ndarray
    blocks: list = field(default_factory=list)  # (block id, D-tilde, weights, residuals)


# --------------------------------------------------------------------------
# row construction


def _numerator(design: DesignRows, spec: NumeratorSpec, panel: ClusterPanel | None) -> np.ndarray:
    if panel is not None:
        value = spec.resolve(panel.A, panel.avail, panel.states, design.row_index)
    elif isinstance(spec.value, str) and spec.value.startswith("column:"):
        raise ValueError("column numerators need the panel")
    else:
        value = spec.resolve(design.A, design.avail)
    return np.broadcast_to(np.asarray(value, dtype=float), (design.n_rows,))


def direct_rows(design: DesignRows, options: EstimatorOptions, panel: ClusterPanel | None = None) -> ScoreRows:
    """Rows for EMEE (``options.estimator == "emee"``) or the cluster-based
    direct estimator."""
    pt = _numerator(design, options.numerator, panel)
    weight = (
        design.avail
        * marginal_weights(design.A, design.prob, pt)
        * lag_weights(design.lag_A, design.lag_prob, options.policy)
    )
    if options.estimator == "emee":
        unit = design.individual
        scale = np.ones(design.n_rows)
        unit_ids = design.individual_ids
    else:
        unit = design.cluster
        n_ind = design.n_individuals
        ind_cluster = np.zeros(n_ind, dtype=np.int64)
        ind_cluster[design.individual] = design.cluster
        sizes = np.bincount(ind_cluster, minlength=design.n_clusters)
        scale = 1.0 / sizes[design.cluster]
        unit_ids = design.cluster_ids
    return ScoreRows(
        unit=unit,
        block=design.individual,
        scale=scale,
        weight=weight,
        x=design.A.astype(float),
        center=design.A - pt,
        Y=design.Y.astype(float),
        f=design.f,
        g=design.g,
        unit_ids=tuple(unit_ids),
        block_ids=tuple(design.individual_ids),
    )


def pair_rows(design: DesignRows, options: EstimatorOptions, panel: ClusterPanel | None = None) -> ScoreRows:
    """Ordered-pair rows for the pairwise indirect estimator.

    Randomization is taken as independent across individuals given the
    history, so p(a, a') = p_j(a) p_j'(a'). Without a joint numerator table
    the numerator is the product of marginals and p~* = p~_j'.
    """
    pt = _numerator(design, options.numerator, panel)
    lagw = lag_weights(design.lag_A, design.lag_prob, options.policy)
    n_ind = design.n_individuals
    T1 = design.n_rows // n_ind
    ind_cluster = design.cluster[::T1]
    sizes = np.bincount(ind_cluster, minlength=design.n_clusters)
    first = np.r_[0, np.cumsum(sizes)[:-1]]
    steps = np.arange(T1)

    rj_parts, rk_parts, unit_parts, block_parts, scale_parts = [], [], [], [], []
    unit_ids, block_ids = [], []
    skipped = 0
    n_blocks = 0
    for m, G in enumerate(sizes):
        if G < 2:
            skipped += 1
            continue
        members = first[m] + np.arange(G)
        jj, kk = np.nonzero(~np.eye(G, dtype=bool))
        rj_parts.append((members[jj][:, None] * T1 + steps).ravel())
        rk_parts.append((members[kk][:, None] * T1 + steps).ravel())
        u = len(unit_ids)
        unit_ids.append(design.cluster_ids[m])
        n_pairs = len(jj)
        unit_parts.append(np.full(n_pairs * T1, u))
        block_parts.append(np.repeat(np.arange(n_blocks, n_blocks + n_pairs), T1))
        block_ids.extend((design.individual_ids[members[a]], design.individual_ids[members[b]]) for a, b in zip(jj, kk))
        n_blocks += n_pairs
        scale_parts.append(np.full(n_pairs * T1, 1.0 / (G * (G - 1))))
    if skipped:
        log.warning("indirect fit: skipped %d cluster(s) of size 1", skipped)
    if not rj_parts:
        raise EstimationError("no eligible pairs: every cluster has size 1")

    rj = np.concatenate(rj_parts)
    rk = np.concatenate(rk_parts)
    Aj, Ak = design.A[rj], design.A[rk]
    pj, pk = design.prob[rj], design.prob[rk]
    denom = np.where(Aj == 1, pj, 1 - pj) * np.where(Ak == 1, pk, 1 - pk)
    joint = options.numerator.joint
    if joint is None:
        ptj, ptk = pt[rj], pt[rk]
        num = np.where(Aj == 1, ptj, 1 - ptj) * np.where(Ak == 1, ptk, 1 - ptk)
        pstar = ptk
    else:
        table = np.array([[joint[(0, 0)], joint[(0, 1)]], [joint[(1, 0)], joint[(1, 1)]]])
        num = table[Aj, Ak]
        pstar = np.full(len(rj), pair_numerator_prob(joint))
    weight = design.avail[rj] * design.avail[rk] * (num / denom) * lagw[rj] * lagw[rk]
    return ScoreRows(
        unit=np.concatenate(unit_parts),
        block=np.concatenate(block_parts),
        scale=np.concatenate(scale_parts),
        weight=weight,
        x=((1 - Aj) * Ak).astype(float),
        center=(1 - Aj) * (Ak - pstar),
        Y=design.Y[rj].astype(float),
        f=design.f[rj],
        g=design.g[rj],
        unit_ids=tuple(unit_ids),
        block_ids=tuple(block_ids),
        skipped_clusters=skipped,
    )


def score_rows_for(design: DesignRows, options: EstimatorOptions, panel: ClusterPanel | None = None) -> ScoreRows:
    if options.estimator == "indirect":
        return pair_rows(design, options, panel)
    return direct_rows(design, options, panel)


# --------------------------------------------------------------------------
# evaluation


def _linear(rows: ScoreRows, theta) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    p = rows.p
    if theta.shape != (p + rows.q,):
        raise ValueError(f"theta has length {theta.size}, expected {p + rows.q}")
    with np.errstate(over="ignore", invalid="ignore"):
        eg = np.exp(rows.g @ theta[:p])
        ey = rows.Y * np.exp(-rows.x * (rows.f @ theta[p:]))
    return eg, ey


def residuals(rows: ScoreRows, theta, check: bool = True) -> np.ndarray:
    """Y exp(-x f'b) - exp(g'a) per row."""
    eg, ey = _linear(rows, theta)
    with np.errstate(invalid="ignore"):
        r = ey - eg
    if check and not np.all(np.isfinite(r)):
        bad = int(np.flatnonzero(~np.isfinite(r))[0])
        raise EstimationError(f"non-finite residual (exp overflow) at row {bad}, unit {rows.unit_ids[rows.unit[bad]]}")
    return r


def residual_gradient(rows: ScoreRows, theta) -> np.ndarray:
    """D-tilde = -dr/dtheta per row, shape (rows, p+q)."""
    eg, ey = _linear(rows, theta)
    return np.concatenate([eg[:, None] * rows.g, (rows.x * ey)[:, None] * rows.f], axis=1)


def unit_scores(rows: ScoreRows, theta) -> np.ndarray:
    """Per-unit estimating-function contributions U_m, shape (units, p+q)."""
    r = residuals(rows, theta)
    return np.add.reduceat(rows.ch * r[:, None], rows.unit_starts, axis=0)


def mean_over_units(U: np.ndarray) -> np.ndarray:
    # correctly rounded sums keep the value independent of unit order
    return np.array([math.fsum(col) for col in U.T]) / U.shape[0]


def ee_value(rows: ScoreRows, theta) -> np.ndarray:
    return mean_over_units(unit_scores(rows, theta))


def ee_jacobian(rows: ScoreRows, theta) -> np.ndarray:
    """Derivative of the averaged estimating function with respect to theta."""
    d = residual_gradient(rows, theta)
    return -np.einsum("ni,nj->ij", rows.ch, d) / rows.n_units


def estimating_function_direct(
    design: DesignRows, theta, options: EstimatorOptions | None = None, panel: ClusterPanel | None = None
):
    """Value of the direct estimating function and per-cluster (or, for EMEE,
    per-individual) contributions."""
    options = options or EstimatorOptions()
    if options.estimator == "indirect":
        options = replace(options, estimator="cemee")
    rows = direct_rows(design, options, panel)
    U = unit_scores(rows, theta)
    return mean_over_units(U), U


def estimating_function_indirect(
    design: DesignRows, theta, options: EstimatorOptions | None = None, panel: ClusterPanel | None = None
):
    options = replace(options or EstimatorOptions(), estimator="indirect")
    rows = pair_rows(design, options, panel)
    U = unit_scores(rows, theta)
    return mean_over_units(U), U


# --------------------------------------------------------------------------
# solving


@dataclass(frozen=True, eq=False)
class FitResult:
    estimator: str
    alpha: np.ndarray
    beta: np.ndarray
    scores: np.ndarray
    bread: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    condition_number: float
    f_labels: tuple
    g_labels: tuple
    options: EstimatorOptions
    rows: ScoreRows
    n_clusters: int

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta])

    @property
    def p(self) -> int:
        return len(self.alpha)

    @property
    def q(self) -> int:
        return len(self.beta)

    @property
    def n_units(self) -> int:
        return self.rows.n_units

    @property
    def unit_ids(self) -> tuple:
        return self.rows.unit_ids

    def contributions(self) -> list[ScoreContribution]:
        d = residual_gradient(self.rows, self.theta)
        r = residuals(self.rows, self.theta)
        c = self.rows.c
        starts = self.rows.block_starts
        ends = np.r_[starts[1:], len(self.rows.block)]
        per_unit: dict[int, list] = {}
        for lo, hi in zip(starts, ends):
            u = int(self.rows.unit[lo])
            per_unit.setdefault(u, []).append(
                (self.rows.block_ids[self.rows.block[lo]], d[lo:hi], c[lo:hi], r[lo:hi])
            )
        return [
            ScoreContribution(self.rows.unit_ids[u], self.scores[u], per_unit.get(u, []))
            for u in range(self.n_units)
        ]

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "alpha": dict(zip(self.g_labels, self.alpha.tolist())),
            "beta": dict(zip(self.f_labels, self.beta.tolist())),
            "converged": self.converged,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "condition_number": self.condition_number,
            "n_units": self.n_units,
            "n_clusters": self.n_clusters,
            "skipped_clusters": self.rows.skipped_clusters,
            "delta": self.options.delta,
            "reference_policy": self.options.policy.code,
        }


def _check_arms(rows: ScoreRows) -> None:
    mass = rows.c * rows.Y
    treated = mass[rows.x == 1].sum()
    control = mass[(rows.x == 0) & (rows.center != 0)].sum()
    if not (treated > 0 and control > 0):
        raise EstimationError("an arm has zero weighted outcome mass; log relative risk undefined")


def _safe_norm(rows, theta):
    try:
        F = ee_value(rows, theta) if np.all(np.isfinite(theta)) else None
    except EstimationError:
        return None, math.inf
    if F is None or not np.all(np.isfinite(F)):
        return None, math.inf
    return F, float(np.max(np.abs(F)))


def solve_rows(rows: ScoreRows, options: EstimatorOptions) -> tuple[np.ndarray, bool, int, float]:
    """Damped Newton from theta = 0 on the averaged estimating function."""
    _check_arms(rows)
    theta = np.zeros(rows.p + rows.q)
    F, norm = _safe_norm(rows, theta)
    if F is None:
        raise EstimationError("estimating function is not finite at theta = 0")
    it = 0
    while norm > options.tol and it < options.max_iter:
        it += 1
        try:
            step = solve_qr(ee_jacobian(rows, theta), -F, "Jacobian")
        except SingularMatrixError as exc:
            raise EstimationError(str(exc)) from exc
        lam = 1.0
        best = None
        for _ in range(options.max_halvings + 1):
            cand = theta + lam * step
            Fc, nc = _safe_norm(rows, cand)
            if Fc is not None:
                best = (cand, Fc, nc)
                if nc < norm:
                    break
            lam *= options.damping
        if best is None:
            break
        theta, F, norm = best
    return theta, norm <= options.tol, it, norm


def _fit(panel, moderator, control, options: EstimatorOptions) -> FitResult:
    moderator = FeatureSpec.parse(moderator)
    control = FeatureSpec.parse(control)
    design = build_design(panel, moderator, control, options.delta, options.outcome)
    rows = score_rows_for(design, options, panel)
    if rows.n_units < 2:
        raise EstimationError("need at least 2 scoring units")
    theta, converged, iterations, norm = solve_rows(rows, options)
    bread = ee_jacobian(rows, theta)
    p = rows.p
    return FitResult(
        estimator=options.estimator,
        alpha=theta[:p],
        beta=theta[p:],
        scores=unit_scores(rows, theta),
        bread=bread,
        converged=converged,
        iterations=iterations,
        residual_norm=norm,
        condition_number=condition_number(bread),
        f_labels=tuple(design.f_labels),
        g_labels=tuple(design.g_labels),
        options=options,
        rows=rows,
        n_clusters=design.n_clusters,
    )


def fit(panel: ClusterPanel, moderator, control, options: EstimatorOptions | None = None, **kwargs) -> FitResult:
    options = replace(options, **kwargs) if options is not None else EstimatorOptions(**kwargs)
    result = _fit(panel, moderator, control, options)
    if not result.converged:
        raise EstimationError(
            f"{result.estimator} did not converge after {result.iterations} iterations "
            f"(residual {result.residual_norm:.3g})"
        )
    return result


def fit_direct(panel, moderator, control, options: EstimatorOptions | None = None, **kwargs) -> FitResult:
    """Cluster-based estimator of the direct marginal excursion effect."""
    return fit(panel, moderator, control, options, **{**kwargs, "estimator": "cemee"})


def fit_emee(panel, moderator, control, options: EstimatorOptions | None = None, **kwargs) -> FitResult:
    """Individual-level EMEE: every individual is its own unit."""
    return fit(panel, moderator, control, options, **{**kwargs, "estimator": "emee"})


def fit_indirect(panel, moderator, control, options: EstimatorOptions | None = None, **kwargs) -> FitResult:
    """Pairwise indirect effect of another cluster member's treatment on an
    untreated individual."""
    return fit(panel, moderator, control, options, **{**kwargs, "estimator": "indirect"})
