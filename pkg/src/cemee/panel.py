"""Clustered micro-randomized trial data: ingestion, validation, design rows.

A panel is stored in long format, one row per (cluster, individual, decision
point), sorted by that key. Every individual shares the same horizon ``T`` and
decision points are numbered ``1..T``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

CANONICAL = ("cluster", "id", "t", "A", "prob", "avail", "Y")
CSV_NAMES = {
    "cluster": "cluster_id",
    "id": "user_id",
    "t": "t",
    "A": "A",
    "prob": "prob_A",
    "avail": "avail",
    "Y": "Y",
}


class PanelError(ValueError):
    """Raised when trial data violates the panel invariants."""


@dataclass(frozen=True)
class IndividualSeries:
    id: object
    A: np.ndarray
    prob: np.ndarray
    avail: np.ndarray
    Y: np.ndarray
    states: dict[str, np.ndarray]

    @property
    def T(self) -> int:
        return len(self.A)


@dataclass(frozen=True)
class Cluster:
    id: object
    members: tuple[IndividualSeries, ...]

    @property
    def size(self) -> int:
        return len(self.members)


def _frozen(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ClusterPanel:
    """Validated long-format panel.

    Row arrays are read-only. ``states`` maps each state column name to a
    float array aligned with the rows.
    """

    cluster: np.ndarray
    user: np.ndarray
    t: np.ndarray
    A: np.ndarray
    prob: np.ndarray
    avail: np.ndarray
    Y: np.ndarray
    states: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("cluster", "user", "t", "A", "prob", "avail", "Y"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(
            self, "states", {k: _frozen(np.asarray(v, dtype=float)) for k, v in self.states.items()}
        )

    @classmethod
    def from_arrays(cls, cluster, user, t, A, prob, Y, avail=None, states=None, validate=True):
        n = len(t)
        panel = cls(
            cluster=np.asarray(cluster),
            user=np.asarray(user),
            t=np.asarray(t, dtype=np.int64),
            A=np.asarray(A, dtype=np.int64),
            prob=np.asarray(prob, dtype=float),
            avail=np.ones(n, dtype=np.int64) if avail is None else np.asarray(avail, dtype=np.int64),
            Y=np.asarray(Y, dtype=np.int64),
            states=dict(states or {}),
        )
        panel = panel._sorted()
        if validate:
            report = validate_panel(panel)
            if report.violations:
                raise PanelError(report.violations[0].message)
        return panel

    def _sorted(self) -> "ClusterPanel":
        order = np.lexsort((self.t, self.user, self.cluster))
        if np.array_equal(order, np.arange(len(order))):
            return self
        return ClusterPanel(
            cluster=self.cluster[order],
            user=self.user[order],
            t=self.t[order],
            A=self.A[order],
            prob=self.prob[order],
            avail=self.avail[order],
            Y=self.Y[order],
            states={k: v[order] for k, v in self.states.items()},
        )

    @property
    def n_rows(self) -> int:
        return len(self.t)

    @property
    def columns(self) -> list[str]:
        return list(self.states)

    @property
    def T(self) -> int:
        return int(self.t.max()) if self.n_rows else 0

    def _codes(self):
        # Rows are sorted, so a new group starts wherever the key changes.
        new_cluster = np.ones(self.n_rows, dtype=bool)
        new_cluster[1:] = self.cluster[1:] != self.cluster[:-1]
        new_user = new_cluster.copy()
        new_user[1:] |= self.user[1:] != self.user[:-1]
        return np.cumsum(new_cluster) - 1, np.cumsum(new_user) - 1

    @property
    def cluster_index(self) -> np.ndarray:
        return self._codes()[0]

    @property
    def individual_index(self) -> np.ndarray:
        return self._codes()[1]

    @property
    def n_clusters(self) -> int:
        return int(self.cluster_index[-1]) + 1 if self.n_rows else 0

    @property
    def n_individuals(self) -> int:
        return int(self.individual_index[-1]) + 1 if self.n_rows else 0

    @property
    def cluster_ids(self) -> list:
        c, _ = self._codes()
        first = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
        return self.cluster[first].tolist()

    @property
    def cluster_sizes(self) -> np.ndarray:
        c, u = self._codes()
        first_user = np.r_[True, u[1:] != u[:-1]]
        return np.bincount(c[first_user], minlength=self.n_clusters)

    @property
    def clusters(self) -> list[Cluster]:
        out = []
        c, u = self._codes()
        bounds = np.flatnonzero(np.r_[True, u[1:] != u[:-1], True])
        members: dict[int, list[IndividualSeries]] = {}
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = slice(lo, hi)
            series = IndividualSeries(
                id=self.user[lo],
                A=self.A[sl],
                prob=self.prob[sl],
                avail=self.avail[sl],
                Y=self.Y[sl],
                states={k: v[sl] for k, v in self.states.items()},
            )
            members.setdefault(int(c[lo]), []).append(series)
        first = np.flatnonzero(np.r_[True, c[1:] != c[:-1]])
        for k, i in enumerate(first):
            out.append(Cluster(id=self.cluster[i], members=tuple(members[k])))
        return out

    def grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape a row-aligned array to (individuals, T)."""
        return np.asarray(values).reshape(self.n_individuals, self.T)


@dataclass
class Violation:
    kind: str
    message: str
    row: int | None = None


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind, message, row=None):
        self.violations.append(Violation(kind, message, row))


def _first(mask: np.ndarray) -> int | None:
    idx = np.flatnonzero(mask)
    return int(idx[0]) if idx.size else None


def validate_panel(panel: ClusterPanel) -> ValidationReport:
    """Check the panel invariants; one violation per failing invariant."""
    report = ValidationReport()
    if panel.n_rows == 0:
        report.add("empty", "panel has no rows")
        return report

    row = _first(~np.isin(panel.Y, (0, 1)))
    if row is not None:
        report.add("outcome", f"non-binary outcome at row {row}", row)
    row = _first(~np.isin(panel.A, (0, 1)))
    if row is not None:
        report.add("treatment", f"non-binary treatment at row {row}", row)
    row = _first(~np.isin(panel.avail, (0, 1)))
    if row is not None:
        report.add("availability", f"non-binary availability at row {row}", row)
    row = _first(~((panel.prob > 0) & (panel.prob < 1)))
    if row is not None:
        report.add("probability", f"probability out of open interval at row {row}", row)
    row = _first((panel.A == 1) & (panel.avail == 0))
    if row is not None:
        report.add("availability", f"treated while unavailable at row {row}", row)
    for name, col in panel.states.items():
        row = _first(~np.isfinite(col))
        if row is not None:
            report.add("state", f"non-finite value in state column {name!r} at row {row}", row)

    same = np.r_[False, (panel.cluster[1:] == panel.cluster[:-1]) & (panel.user[1:] == panel.user[:-1])]
    dup = same & np.r_[False, panel.t[1:] == panel.t[:-1]]
    row = _first(dup)
    if row is not None:
        report.add("duplicate", f"duplicate (individual, t) at row {row}", row)
    starts = ~same
    # expected t is 1 at each series start and increments by one within a series
    idx = np.arange(panel.n_rows)
    expected = idx - np.maximum.accumulate(np.where(starts, idx, 0)) + 1
    row = _first((panel.t != expected) & ~dup)
    if row is not None:
        report.add("gap", f"gap in decision index at row {row}", row)
    if not report.violations:
        lengths = np.diff(np.r_[np.flatnonzero(starts), panel.n_rows])
        if np.any(lengths != lengths[0]):
            report.add("horizon", "individuals have unequal numbers of decision points")
    return report


def read_schema(source: str | Path | Mapping | None) -> dict[str, str]:
    """Column-name mapping from canonical keys to CSV headers."""
    mapping = dict(CSV_NAMES)
    if source is None:
        return mapping
    if not isinstance(source, Mapping):
        source = json.loads(Path(source).read_text())
    unknown = set(source) - set(CANONICAL)
    if unknown:
        raise PanelError(f"unknown schema keys: {sorted(unknown)}")
    mapping.update(source)
    return mapping


def load_panel(
    path: str | Path, schema: str | Path | Mapping | None = None, validate: bool = True
) -> ClusterPanel:
    """Read a long CSV into a panel (validated unless ``validate=False``).

    ``schema`` maps canonical keys (cluster, id, t, A, prob, avail, Y) to the
    CSV headers. A missing availability column means always available.
    """
    mapping = read_schema(schema)
    df = pd.read_csv(path, float_precision="round_trip")
    optional = {"avail"}
    missing = [mapping[k] for k in CANONICAL if k not in optional and mapping[k] not in df.columns]
    if missing:
        raise PanelError(f"missing column(s): {missing}")
    used = {mapping[k] for k in CANONICAL}
    states = {c: df[c].to_numpy(dtype=float) for c in df.columns if c not in used}
    avail = df[mapping["avail"]].to_numpy() if mapping["avail"] in df.columns else None
    return _panel_from_columns(
        df[mapping["cluster"]].to_numpy(),
        df[mapping["id"]].to_numpy(),
        df[mapping["t"]].to_numpy(),
        df[mapping["A"]].to_numpy(),
        df[mapping["prob"]].to_numpy(dtype=float),
        df[mapping["Y"]].to_numpy(),
        avail,
        states,
        validate,
    )


def _as_int(values, what: str) -> np.ndarray:
    values = np.asarray(values)
    if values.dtype.kind in "iub":
        return values.astype(np.int64)
    as_float = values.astype(float)
    if not np.all(np.isfinite(as_float)) or np.any(as_float != np.round(as_float)):
        raise PanelError(f"non-binary {what}")
    return as_float.astype(np.int64)


def _panel_from_columns(cluster, user, t, A, prob, Y, avail, states, validate=True) -> ClusterPanel:
    panel = ClusterPanel(
        cluster=cluster,
        user=user,
        t=_as_int(t, "decision index"),
        A=_as_int(A, "treatment"),
        prob=np.asarray(prob, dtype=float),
        avail=np.ones(len(t), dtype=np.int64) if avail is None else _as_int(avail, "availability"),
        Y=_as_int(Y, "outcome"),
        states=states,
    )._sorted()
    if not validate:
        return panel
    report = validate_panel(panel)
    if report.violations:
        raise PanelError(report.violations[0].message)
    return panel


def panel_frame(panel: ClusterPanel) -> pd.DataFrame:
    data = {
        CSV_NAMES["cluster"]: panel.cluster,
        CSV_NAMES["id"]: panel.user,
        CSV_NAMES["t"]: panel.t,
        CSV_NAMES["A"]: panel.A,
        CSV_NAMES["prob"]: panel.prob,
        CSV_NAMES["avail"]: panel.avail,
        CSV_NAMES["Y"]: panel.Y,
    }
    data.update(panel.states)
    return pd.DataFrame(data)


def write_panel(panel: ClusterPanel, path: str | Path) -> None:
    # 17 significant digits round-trip doubles exactly
    panel_frame(panel).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


# --------------------------------------------------------------------------
# Features and design rows


@dataclass(frozen=True)
class Term:
    kind: str  # "intercept" | "column" | "time" | "scaled"
    name: str | None = None
    factor: float = 1.0

    def label(self) -> str:
        if self.kind == "intercept":
            return "(Intercept)"
        if self.kind == "time":
            return "t"
        if self.kind == "scaled":
            return f"{self.name}*{self.factor:g}"
        return str(self.name)


@dataclass(frozen=True)
class FeatureSpec:
    """Ordered feature map; each term becomes one column of f_t or g_t."""

    terms: tuple[Term, ...]

    def __post_init__(self):
        if len(self.terms) == 0:
            raise PanelError("feature spec needs at least one term")

    @classmethod
    def parse(cls, items: Iterable[str | Mapping] | "FeatureSpec") -> "FeatureSpec":
        """Build from tokens: ``"intercept"``/``"1"``, ``"t"``/``"time"``,
        ``"name"`` for a state column, ``"name*factor"`` for a scaled column.
        """
        if isinstance(items, FeatureSpec):
            return items
        if isinstance(items, str):
            items = [items]
        terms = []
        for item in items:
            if isinstance(item, Mapping):
                terms.append(Term(item["kind"], item.get("name"), float(item.get("factor", 1.0))))
                continue
            token = str(item).strip()
            if token in ("1", "intercept"):
                terms.append(Term("intercept"))
            elif token in ("t", "time"):
                terms.append(Term("time"))
            elif "*" in token:
                name, factor = token.rsplit("*", 1)
                terms.append(Term("scaled", name.strip(), float(factor)))
            else:
                terms.append(Term("column", token))
        return cls(tuple(terms))

    @property
    def dim(self) -> int:
        return len(self.terms)

    @property
    def labels(self) -> list[str]:
        return [term.label() for term in self.terms]

    def check(self, panel: ClusterPanel) -> None:
        for term in self.terms:
            if term.kind in ("column", "scaled") and term.name not in panel.states:
                raise PanelError(f"unknown column {term.name!r}")

    def evaluate(self, panel: ClusterPanel, rows: np.ndarray | slice = slice(None)) -> np.ndarray:
        self.check(panel)
        t = panel.t[rows].astype(float)
        cols = []
        for term in self.terms:
            if term.kind == "intercept":
                cols.append(np.ones_like(t))
            elif term.kind == "time":
                cols.append(t)
            elif term.kind == "column":
                cols.append(panel.states[term.name][rows])
            elif term.kind == "scaled":
                cols.append(panel.states[term.name][rows] * term.factor)
            else:
                raise PanelError(f"unknown term kind {term.kind!r}")
        return np.column_stack(cols)


@dataclass(frozen=True)
class LaggedOutcome:
    delta: int
    values: np.ndarray  # (individuals, T - delta + 1)


def lagged_outcome(panel: ClusterPanel, delta: int, definition: str = "shifted-proximal") -> LaggedOutcome:
    """Y_{t,delta} for t = 1..T-delta+1.

    ``definition`` is ``"shifted-proximal"`` (proximal outcome recorded at
    decision t+delta-1) or the name of a binary state column holding the
    lagged outcome directly.
    """
    if delta < 1:
        raise PanelError("delta must be >= 1")
    T = panel.T
    if delta > T:
        raise PanelError(f"delta={delta} exceeds horizon T={T}")
    keep = T - delta + 1
    if definition == "shifted-proximal":
        y = panel.grid(panel.Y)[:, delta - 1 :]
    else:
        if definition not in panel.states:
            raise PanelError(f"unknown column {definition!r}")
        col = panel.states[definition]
        if not np.all(np.isin(col, (0.0, 1.0))):
            raise PanelError(f"non-binary outcome column {definition!r}")
        y = panel.grid(col.astype(np.int64))[:, :keep]
    return LaggedOutcome(delta, _frozen(y))


@dataclass(frozen=True, eq=False)
class DesignRows:
    """Rows (cluster, individual, t <= T-delta+1) ready for estimation.

    ``lag_A`` and ``lag_prob`` hold the treatment window u = t+1..t+delta-1
    (shape rows x (delta-1)); ``prob`` is P(A=1 | H_t).
    """

    cluster: np.ndarray
    individual: np.ndarray
    t: np.ndarray
    f: np.ndarray
    g: np.ndarray
    A: np.ndarray
    prob: np.ndarray
    avail: np.ndarray
    Y: np.ndarray
    lag_A: np.ndarray
    lag_prob: np.ndarray
    delta: int
    row_index: np.ndarray
    f_labels: tuple[str, ...]
    g_labels: tuple[str, ...]
    cluster_ids: tuple
    individual_ids: tuple

    @property
    def n_rows(self) -> int:
        return len(self.t)

    @property
    def n_individuals(self) -> int:
        return len(self.individual_ids)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def q(self) -> int:
        return self.f.shape[1]

    @property
    def p(self) -> int:
        return self.g.shape[1]


def build_design(
    panel: ClusterPanel,
    moderator: FeatureSpec | Sequence[str],
    control: FeatureSpec | Sequence[str],
    delta: int = 1,
    outcome: str = "shifted-proximal",
) -> DesignRows:
    moderator = FeatureSpec.parse(moderator)
    control = FeatureSpec.parse(control)
    moderator.check(panel)
    control.check(panel)
    lagged = lagged_outcome(panel, delta, outcome)
    T = panel.T
    keep = T - delta + 1
    n_ind = panel.n_individuals
    rows = (np.arange(n_ind)[:, None] * T + np.arange(keep)[None, :]).ravel()

    grid_A = panel.grid(panel.A)
    grid_p = panel.grid(panel.prob)
    if delta > 1:
        lag_A = np.stack([grid_A[:, k : k + keep] for k in range(1, delta)], axis=-1).reshape(-1, delta - 1)
        lag_p = np.stack([grid_p[:, k : k + keep] for k in range(1, delta)], axis=-1).reshape(-1, delta - 1)
    else:
        lag_A = np.zeros((len(rows), 0), dtype=np.int64)
        lag_p = np.zeros((len(rows), 0))

    ind_codes = panel.individual_index
    first_row = np.flatnonzero(np.r_[True, ind_codes[1:] != ind_codes[:-1]])
    return DesignRows(
        cluster=panel.cluster_index[rows],
        individual=ind_codes[rows],
        t=panel.t[rows],
        f=moderator.evaluate(panel, rows),
        g=control.evaluate(panel, rows),
        A=panel.A[rows],
        prob=panel.prob[rows],
        avail=panel.avail[rows],
        Y=lagged.values.ravel(),
        lag_A=lag_A,
        lag_prob=lag_p,
        delta=delta,
        row_index=rows,
        f_labels=tuple(moderator.labels),
        g_labels=tuple(control.labels),
        cluster_ids=tuple(panel.cluster_ids),
        individual_ids=tuple((panel.cluster[i], panel.user[i]) for i in first_row),
    )
