"""Small dense solves with rank diagnostics."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.linalg import qr, solve_triangular

COND_WARN = 1e10


class SingularMatrixError(np.linalg.LinAlgError):
    def __init__(self, message: str, condition_number: float):
        super().__init__(f"{message} (condition number {condition_number:.3g})")
        self.condition_number = condition_number


def condition_number(A: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        c = float(np.linalg.cond(A))
    return c if np.isfinite(c) else float("inf")


def solve_qr(A: np.ndarray, b: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Solve A x = b by QR with column pivoting.

    Raises SingularMatrixError when A is numerically rank deficient and warns
    when its condition number exceeds 1e10.
    """
    A = np.asarray(A, dtype=float)
    if not np.all(np.isfinite(A)):
        raise SingularMatrixError(f"non-finite {what}", float("inf"))
    n = A.shape[0]
    Q, R, piv = qr(A, pivoting=True)
    diag = np.abs(np.diag(R))
    if diag[0] == 0 or diag[-1] <= diag[0] * n * np.finfo(float).eps * 10:
        raise SingularMatrixError(f"singular {what}", condition_number(A))
    cond = condition_number(A)
    if cond > COND_WARN:
        warnings.warn(f"ill-conditioned {what} (condition number {cond:.3g})", RuntimeWarning, stacklevel=2)
    rhs = Q.T @ np.asarray(b, dtype=float)
    z = solve_triangular(R, rhs)
    x = np.empty_like(z)
    x[piv] = z
    return x


def inv_qr(A: np.ndarray, what: str = "matrix") -> np.ndarray:
    return solve_qr(A, np.eye(A.shape[0]), what)
