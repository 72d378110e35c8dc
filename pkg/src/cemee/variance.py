"""Sandwich covariance, small-sample correction and t-based inference."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .estimators import EstimationError, FitResult, residual_gradient, residuals
from .linalg import inv_qr

SMALL_SAMPLE_CLUSTERS = 50


class InferenceError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CovarianceResult:
    cov: np.ndarray
    meat: np.ndarray
    p: int
    q: int
    n_units: int
    corrected: bool

    @property
    def df(self) -> int:
        return self.n_units - self.p - self.q

    @property
    def beta_cov(self) -> np.ndarray:
        return self.cov[self.p :, self.p :]

    @property
    def beta_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.beta_cov))


def _symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def meat_matrix(U: np.ndarray) -> np.ndarray:
    """(1/M) sum_m U_m U_m^T."""
    return np.einsum("mi,mj->ij", U, U) / U.shape[0]


def _assemble(fit: FitResult, U: np.ndarray, corrected: bool) -> CovarianceResult:
    if not fit.converged:
        raise InferenceError("fit did not converge")
    Qinv = inv_qr(fit.bread, "bread matrix")
    W = meat_matrix(U)
    cov = _symmetrize(Qinv @ W @ Qinv.T / U.shape[0])
    return CovarianceResult(cov, W, fit.p, fit.q, U.shape[0], corrected)


def sandwich(fit: FitResult) -> CovarianceResult:
    """Robust covariance Q^-1 W Q^-T / M with Q the empirical Jacobian."""
    return _assemble(fit, fit.scores, corrected=False)


def _block_sums(fit: FitResult):
    rows = fit.rows
    d = residual_gradient(rows, fit.theta)
    r = residuals(rows, fit.theta)
    bs = rows.block_starts
    S = np.add.reduceat(rows.ch[:, :, None] * d[:, None, :], bs, axis=0)
    s = np.add.reduceat(rows.ch * r[:, None], bs, axis=0)
    B = np.einsum("ni,nj->ij", rows.ch, d)
    return S, s, B, d, r


def _units_from_blocks(fit: FitResult, per_block: np.ndarray) -> np.ndarray:
    block_unit = fit.rows.unit[fit.rows.block_starts]
    starts = np.flatnonzero(np.r_[True, block_unit[1:] != block_unit[:-1]])
    return np.add.reduceat(per_block, starts, axis=0)


def corrected_scores(fit: FitResult, method: str = "woodbury") -> np.ndarray:
    """Per-unit scores with each block's residuals replaced by (I - H)^-1 e.

    H = D (sum over all blocks of h' C D)^-1 h' C, with C the row weights
    including the cluster-averaging scale. ``woodbury`` works in the
    (p+q)-dimensional space; ``direct`` forms and inverts the T x T matrix
    per block and is kept as a reference implementation.
    """
    S, s, B, d, r = _block_sums(fit)
    Binv = inv_qr(B, "leverage normal matrix")
    k = B.shape[0]
    rows = fit.rows
    if method == "woodbury":
        K = np.eye(k) - np.einsum("ij,bjk->bik", Binv, S)
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(K)
        bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e12))
        if bad.size:
            raise EstimationError(f"I - H singular for block {rows.block_ids[bad[0]]}")
        v = np.linalg.solve(K, (s @ Binv.T)[..., None])[..., 0]
        per_block = s + np.einsum("bij,bj->bi", S, v)
    elif method == "direct":
        starts = rows.block_starts
        ends = np.r_[starts[1:], len(rows.block)]
        per_block = np.empty_like(s)
        for b, (lo, hi) in enumerate(zip(starts, ends)):
            ch = rows.ch[lo:hi]
            H = d[lo:hi] @ Binv @ ch.T
            I_H = np.eye(hi - lo) - H
            try:
                e_star = np.linalg.solve(I_H, r[lo:hi])
            except np.linalg.LinAlgError as exc:
                raise EstimationError(f"I - H singular for block {rows.block_ids[b]}") from exc
            per_block[b] = ch.T @ e_star
    else:
        raise ValueError(f"unknown method {method!r}")
    return _units_from_blocks(fit, per_block)


def leverage_block(fit: FitResult, block: int) -> np.ndarray:
    """H for one block (rows of a single individual or pair)."""
    _, _, B, d, _ = _block_sums(fit)
    rows = fit.rows
    starts = rows.block_starts
    lo = starts[block]
    hi = starts[block + 1] if block + 1 < len(starts) else len(rows.block)
    return d[lo:hi] @ inv_qr(B) @ rows.ch[lo:hi].T


def small_sample_correct(fit: FitResult, method: str = "woodbury") -> CovarianceResult:
    return _assemble(fit, corrected_scores(fit, method), corrected=True)


def covariance(fit: FitResult, small_sample: bool | str = "auto") -> CovarianceResult:
    """Sandwich covariance, corrected by default when there are fewer than 50
    clusters."""
    if small_sample == "auto":
        small_sample = fit.n_clusters < SMALL_SAMPLE_CLUSTERS
    return small_sample_correct(fit) if small_sample else sandwich(fit)


# --------------------------------------------------------------------------
# inference


def t_critical(df: float, xi: float = 0.05) -> float:
    """Two-sided critical value t^-1_df(1 - xi/2)."""
    if not 0 < xi < 1:
        raise InferenceError("xi must lie in (0, 1)")
    if df < 1:
        raise InferenceError(f"degrees of freedom {df} < 1")
    return float(stats.t.ppf(1 - xi / 2, df))


def t_pvalue(tstat: float, df: float) -> float:
    if math.isnan(tstat):
        return 1.0
    return float(min(1.0, 2 * stats.t.sf(abs(tstat), df)))


@dataclass(frozen=True)
class Estimate:
    name: str
    estimate: float
    se: float
    t: float
    p: float
    lower: float
    upper: float

    def as_row(self) -> dict:
        return {
            "coefficient": self.name,
            "estimate": self.estimate,
            "se": self.se,
            "t": self.t,
            "p": self.p,
            "lo": self.lower,
            "hi": self.upper,
        }


def _estimate(name, value, se, crit, df) -> Estimate:
    if se > 0:
        tstat = value / se
    else:
        tstat = math.copysign(math.inf, value) if value != 0 else math.nan
    return Estimate(name, float(value), float(se), tstat, t_pvalue(tstat, df), value - crit * se, value + crit * se)


@dataclass(frozen=True)
class InferenceSummary:
    coefficients: list[Estimate]
    contrasts: list[Estimate] = field(default_factory=list)
    df: int = 0
    xi: float = 0.05
    corrected: bool = False
    estimator: str = ""

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "df": self.df,
            "xi": self.xi,
            "small_sample_corrected": self.corrected,
            "coefficients": [e.as_row() for e in self.coefficients],
            "contrasts": [e.as_row() for e in self.contrasts],
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([e.as_row() for e in self.coefficients + self.contrasts])

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def contrast_se(cov: CovarianceResult, c) -> float:
    c = np.asarray(c, dtype=float)
    if c.shape != (cov.q,):
        raise InferenceError(f"contrast has length {c.size}, expected {cov.q}")
    return float(np.sqrt(max(c @ cov.beta_cov @ c, 0.0)))


def infer(fit: FitResult, cov: CovarianceResult | None = None, contrasts=(), xi: float = 0.05) -> InferenceSummary:
    cov = cov or covariance(fit)
    crit = t_critical(cov.df, xi)
    se = cov.beta_se
    coefs = [_estimate(name, b, s, crit, cov.df) for name, b, s in zip(fit.f_labels, fit.beta, se)]
    cons = []
    for i, c in enumerate(contrasts):
        c = np.asarray(c, dtype=float)
        name = "contrast[" + ",".join(f"{v:g}" for v in c) + "]" if c.size < 8 else f"contrast{i}"
        cons.append(_estimate(name, float(c @ fit.beta), contrast_se(cov, c), crit, cov.df))
    return InferenceSummary(coefs, cons, cov.df, xi, cov.corrected, fit.estimator)


@dataclass(frozen=True)
class CurvePoint:
    s: float
    effect: float
    se: float
    lower: float
    upper: float


def moderation_curve(fit: FitResult, cov: CovarianceResult | None, grid, xi: float = 0.05) -> list[CurvePoint]:
    """Pointwise effect beta0 + beta1 s with t-based bands."""
    if fit.q != 2:
        raise InferenceError(f"moderation curve needs two effect terms, got {fit.q}")
    cov = cov or covariance(fit)
    crit = t_critical(cov.df, xi)
    out = []
    for s in grid:
        c = np.array([1.0, float(s)])
        eff = float(c @ fit.beta)
        se = contrast_se(cov, c)
        out.append(CurvePoint(float(s), eff, se, eff - crit * se, eff + crit * se))
    return out


def curve_frame(points: list[CurvePoint]) -> pd.DataFrame:
    return pd.DataFrame([vars(p) for p in points])
