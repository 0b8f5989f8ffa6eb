"""Challenge-style rank aggregation: sum of per-metric ranks over aggregate
metrics, and mean of per-case ranks over per-case metrics.

Undefined entries (``NaN``/``None``) are left out of the ranking of their
column; the remaining methods are ranked ``1..n'``.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import InvalidInputError


class Orientation(str, enum.Enum):
    HIGHER = "higher"
    LOWER = "lower"


def _as_values(values) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


def rank_column(values, orientation) -> np.ndarray:
    """Rank 1 = best; ties share the average of the positions they cover.

    Undefined entries get ``NaN`` ranks.
    """
    orientation = Orientation(orientation)
    vals = _as_values(values)
    if vals.size == 0:
        raise InvalidInputError("cannot rank an empty column")
    if np.any(np.isinf(vals)):
        raise InvalidInputError("ranked values must be finite")
    defined = ~np.isnan(vals)
    ranks = np.full(vals.shape, np.nan)
    if defined.any():
        key = vals[defined] if orientation is Orientation.LOWER else -vals[defined]
        ranks[defined] = rankdata(key, method="average")
    return ranks


@dataclass
class MetricTable:
    methods: list[str]
    metrics: list[str]
    orientations: list[Orientation]
    values: np.ndarray

    def __post_init__(self):
        self.orientations = [Orientation(o) for o in self.orientations]
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.methods), len(self.metrics)):
            raise InvalidInputError(
                f"values shape {self.values.shape} does not match "
                f"{len(self.methods)} methods x {len(self.metrics)} metrics"
            )
        if len(self.orientations) != len(self.metrics):
            raise InvalidInputError("need one orientation per metric column")
        if not self.methods:
            raise InvalidInputError("table has no methods")


@dataclass
class RankResult:
    mode: str
    methods: list[str]
    scores: np.ndarray
    ranks: np.ndarray
    flagged: list[str] = field(default_factory=list)

    @property
    def ordering(self) -> list[str]:
        ok = [i for i, m in enumerate(self.methods) if m not in self.flagged]
        ok.sort(key=lambda i: (self.scores[i], i))
        return [self.methods[i] for i in ok]

    def to_dict(self) -> dict:
        def clean(x):
            return None if np.isnan(x) else float(x)

        return {
            "mode": self.mode,
            "methods": list(self.methods),
            "scores": {m: clean(s) for m, s in zip(self.methods, self.scores)},
            "ranks": [[clean(x) for x in row] for row in np.atleast_2d(self.ranks)],
            "ordering": self.ordering,
            "flagged": list(self.flagged),
        }


def sum_rank(table: MetricTable) -> RankResult:
    """Per-method sum of its column ranks.  A method undefined in any column is
    flagged and left out of the ordering."""
    ranks = np.column_stack(
        [rank_column(table.values[:, j], o) for j, o in enumerate(table.orientations)]
    )
    scores = ranks.sum(axis=1)
    flagged = [m for m, s in zip(table.methods, scores) if np.isnan(s)]
    return RankResult("sum", list(table.methods), scores, ranks, flagged)


def mean_case_rank(per_case, orientations, methods=None) -> RankResult:
    """``per_case`` has shape (cases, methods, metrics).

    Each case ranks the methods per metric, a method's case score is the mean
    of its defined metric ranks, and the final score is the mean over the cases
    where the method has any defined rank.  ``ranks`` in the result holds the
    per-case scores, shape (cases, methods).
    """
    data = np.asarray(
        [[_as_values(row) for row in case] for case in per_case], dtype=np.float64
    )
    if data.ndim != 3 or data.shape[0] == 0 or data.shape[1] == 0:
        raise InvalidInputError(f"per_case must be a nonempty (cases, methods, metrics) array, got {data.shape}")
    n_cases, n_methods, n_metrics = data.shape
    if len(orientations) != n_metrics:
        raise InvalidInputError("need one orientation per metric")
    methods = list(methods) if methods is not None else [f"method{i}" for i in range(n_methods)]
    if len(methods) != n_methods:
        raise InvalidInputError("method names do not match the methods axis")
    case_scores = np.full((n_cases, n_methods), np.nan)
    for c in range(n_cases):
        r = np.column_stack([rank_column(data[c, :, j], orientations[j]) for j in range(n_metrics)])
        defined = ~np.isnan(r)
        counts = defined.sum(axis=1)
        sums = np.where(defined, r, 0.0).sum(axis=1)
        case_scores[c] = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    defined = ~np.isnan(case_scores)
    counts = defined.sum(axis=0)
    scores = np.where(
        counts > 0, np.where(defined, case_scores, 0.0).sum(axis=0) / np.maximum(counts, 1), np.nan
    )
    flagged = [m for m, n in zip(methods, counts) if n == 0]
    return RankResult("case", methods, scores, case_scores, flagged)


# -- CSV table format -----------------------------------------------------------


def parse_table_csv(text: str) -> MetricTable:
    """Header row of metric names (first cell names the method column), a row
    of orientations, then one row per method.  ``#`` lines are comments."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.reader(lines))
    if len(rows) < 3:
        raise InvalidInputError("table needs a header, an orientation row and at least one method")
    header, orient = rows[0], rows[1]
    metrics = [h.strip() for h in header[1:]]
    orientations = [o.strip().lower() for o in orient[1:]]
    if len(orientations) != len(metrics):
        raise InvalidInputError("orientation row length does not match header")
    try:
        orientations = [Orientation(o) for o in orientations]
    except ValueError as exc:
        raise InvalidInputError(f"orientations must be 'higher' or 'lower': {exc}") from exc
    methods, values = [], []
    for row in rows[2:]:
        if len(row) != len(metrics) + 1:
            raise InvalidInputError(f"row for {row[0]!r} has {len(row) - 1} values, expected {len(metrics)}")
        methods.append(row[0].strip())
        values.append([_parse_cell(c) for c in row[1:]])
    return MetricTable(methods, metrics, orientations, np.array(values, dtype=np.float64))


def _parse_cell(cell: str) -> float:
    cell = cell.strip()
    if cell.lower() in ("", "na", "nan", "none", "undefined"):
        return np.nan
    try:
        return float(cell)
    except ValueError as exc:
        raise InvalidInputError(f"not a number: {cell!r}") from exc


def format_table_csv(table: MetricTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *table.metrics])
    w.writerow(["orientation", *(o.value for o in table.orientations)])
    for m, row in zip(table.methods, table.values):
        w.writerow([m, *("" if np.isnan(v) else repr(float(v)) for v in row)])
    return buf.getvalue()
