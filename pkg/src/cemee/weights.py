"""Inverse-probability weights for the excursion-effect estimating equations.

Scalar functions mirror the textbook definitions and are used as oracles in
the tests; the ``*_weights`` array versions are what the estimators call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class WeightError(ValueError):
    pass


def _open_unit(x, what="probability"):
    x = np.asarray(x, dtype=float)
    if np.any(~((x > 0) & (x < 1))):
        raise WeightError(f"{what} must lie in (0, 1)")
    return x


@dataclass(frozen=True)
class ReferencePolicy:
    """Treatment distribution assumed for u = t+1 .. t+delta-1.

    ``kind`` is one of ``observed`` (the trial's own randomization, "otd"),
    ``always-treat`` ("st"), ``always-control`` ("sc") or ``fixed`` with
    probability ``pi`` of treatment.
    """

    kind: str = "observed"
    pi: float | None = None

    def __post_init__(self):
        if self.kind not in ("observed", "always-treat", "always-control", "fixed"):
            raise WeightError(f"unknown reference policy {self.kind!r}")
        if self.kind == "fixed" and (self.pi is None or not 0.0 <= self.pi <= 1.0):
            raise WeightError("fixed policy needs pi in [0, 1]")

    @classmethod
    def parse(cls, value: "str | ReferencePolicy") -> "ReferencePolicy":
        if isinstance(value, ReferencePolicy):
            return value
        key = str(value).strip().lower()
        aliases = {
            "otd": "observed",
            "observed": "observed",
            "st": "always-treat",
            "always-treat": "always-treat",
            "sc": "always-control",
            "always-control": "always-control",
        }
        if key in aliases:
            return cls(aliases[key])
        if key.startswith("fixed:"):
            return cls("fixed", float(key.split(":", 1)[1]))
        raise WeightError(f"unknown reference policy {value!r}")

    @property
    def code(self) -> str:
        if self.kind == "fixed":
            return f"fixed:{self.pi:g}"
        return {"observed": "otd", "always-treat": "st", "always-control": "sc"}[self.kind]

    def treat_prob(self, p_obs):
        """Probability of treatment the policy assigns, given the trial's."""
        if self.kind == "observed":
            return p_obs
        if self.kind == "always-treat":
            return np.ones_like(np.asarray(p_obs, dtype=float))
        if self.kind == "always-control":
            return np.zeros_like(np.asarray(p_obs, dtype=float))
        return np.full_like(np.asarray(p_obs, dtype=float), self.pi)


@dataclass(frozen=True)
class NumeratorSpec:
    """Numerator probabilities p~ for the weights.

    ``value`` is a constant in (0,1), the string ``"empirical"`` (study-wide
    treated fraction, resolved against the data), or ``column:<name>`` for a
    per-row lookup. ``joint`` optionally gives the pair table
    ``{(0,0): .., (0,1): .., (1,0): .., (1,1): ..}``; without it pairs use the
    product of marginals.
    """

    value: float | str = "empirical"
    joint: dict | None = None

    def __post_init__(self):
        if isinstance(self.value, str):
            if self.value != "empirical" and not self.value.startswith("column:"):
                raise WeightError(f"unknown numerator {self.value!r}")
        else:
            _open_unit(self.value, "numerator probability")
        if self.joint is not None:
            table = {tuple(k): float(v) for k, v in self.joint.items()}
            if set(table) != {(0, 0), (0, 1), (1, 0), (1, 1)}:
                raise WeightError("joint numerator needs all four cells")
            _open_unit(list(table.values()), "joint numerator probability")
            if abs(sum(table.values()) - 1.0) > 1e-12:
                raise WeightError("joint numerator must sum to 1")
            object.__setattr__(self, "joint", table)

    @classmethod
    def parse(cls, value) -> "NumeratorSpec":
        if isinstance(value, NumeratorSpec):
            return value
        if isinstance(value, dict):
            return cls(value.get("value", "empirical"), value.get("joint"))
        if isinstance(value, str) and value not in ("empirical",) and not value.startswith("column:"):
            return cls(float(value))
        return cls(value)

    def resolve(self, A, avail=None, states=None, rows=None) -> np.ndarray | float:
        """Marginal p~(1|S) as a constant or a row-aligned array."""
        if isinstance(self.value, str) and self.value == "empirical":
            A = np.asarray(A)
            mask = np.ones(len(A), bool) if avail is None else np.asarray(avail) == 1
            frac = float(A[mask].mean())
            return float(_open_unit(frac, "empirical treated fraction"))
        if isinstance(self.value, str):
            name = self.value.split(":", 1)[1]
            if states is None or name not in states:
                raise WeightError(f"unknown numerator column {name!r}")
            col = np.asarray(states[name], dtype=float)
            col = col if rows is None else col[rows]
            return _open_unit(col, "numerator probability")
        return float(self.value)


# --------------------------------------------------------------------------
# scalar definitions


def marginal_weight(a: int, p1: float, pt1: float) -> float:
    """p~(a) / p(a) for a binary treatment."""
    p1 = float(_open_unit(p1))
    pt1 = float(_open_unit(pt1, "numerator probability"))
    if a == 1:
        return pt1 / p1
    return (1.0 - pt1) / (1.0 - p1)


def lag_weight(window, policy: ReferencePolicy | str, delta: int | None = None) -> float:
    """Product over the lag window of pi_u(a_u) / p_u(a_u).

    ``window`` is a sequence of (a_u, p_u) with p_u the trial's probability of
    the *realized* action a_u.
    """
    policy = ReferencePolicy.parse(policy)
    window = list(window)
    if delta is not None:
        if delta < 1:
            raise WeightError("delta must be >= 1")
        if delta > 1 and not window:
            raise WeightError("empty lag window with delta > 1")
        if len(window) != delta - 1:
            raise WeightError("lag window length must be delta - 1")
    w = 1.0
    for a, p_a in window:
        p_a = float(_open_unit(p_a))
        if policy.kind == "observed":
            continue
        if policy.kind == "always-treat":
            num = 1.0 if a == 1 else 0.0
        elif policy.kind == "always-control":
            num = 1.0 if a == 0 else 0.0
        else:
            num = policy.pi if a == 1 else 1.0 - policy.pi
        w *= num / p_a
    return w


def pair_numerator_prob(joint: dict) -> float:
    """p~*(1|S) = p~(0,1) / (p~(0,0) + p~(0,1))."""
    p00 = float(joint[(0, 0)])
    p01 = float(joint[(0, 1)])
    if p00 + p01 <= 0:
        raise WeightError("p~(0,0) + p~(0,1) must be positive")
    return p01 / (p00 + p01)


def pair_weight(a: int, a2: int, denom: float, joint: dict) -> float:
    """p~(a, a') / p(a, a')."""
    denom = float(_open_unit(denom, "pair probability"))
    num = float(_open_unit(joint[(a, a2)], "joint numerator probability"))
    return num / denom


def product_joint(pt1: float, pt2: float | None = None) -> dict:
    """Joint table of two independent Bernoulli numerators."""
    pt2 = pt1 if pt2 is None else pt2
    return {
        (a, b): (pt1 if a else 1 - pt1) * (pt2 if b else 1 - pt2) for a in (0, 1) for b in (0, 1)
    }


# --------------------------------------------------------------------------
# vectorized forms


def marginal_weights(A, p1, pt1) -> np.ndarray:
    A = np.asarray(A)
    p1 = _open_unit(p1)
    pt1 = _open_unit(pt1, "numerator probability")
    return np.where(A == 1, pt1 / p1, (1.0 - pt1) / (1.0 - p1))


def lag_weights(lag_A, lag_p1, policy: ReferencePolicy | str) -> np.ndarray:
    """Row-wise lag weights; ``lag_A``/``lag_p1`` have shape (rows, delta-1)
    with ``lag_p1`` the trial's probability of treatment."""
    policy = ReferencePolicy.parse(policy)
    lag_A = np.asarray(lag_A)
    n = lag_A.shape[0]
    if lag_A.ndim < 2 or lag_A.shape[1] == 0 or policy.kind == "observed":
        return np.ones(n)
    lag_p1 = _open_unit(lag_p1)
    p_real = np.where(lag_A == 1, lag_p1, 1.0 - lag_p1)
    pi1 = policy.treat_prob(lag_p1)
    num = np.where(lag_A == 1, pi1, 1.0 - pi1)
    return np.prod(num / p_real, axis=1)
