"""Balanced-panel container, CSV ingestion, fold machinery and the two
fixed-effect-removing transforms (lag differencing, cross-fold demeaning).

Periods are 1-based everywhere in the public API: period t lives in column
t - 1 of the arrays. Fold indices are 1-based as well.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BalanceError,
    ConfigError,
    DomainError,
    DuplicateError,
    LagError,
    ParseError,
    SelfDemeanError,
    ShapeError,
)


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelDataset:
    """Immutable balanced panel.

    outcome, treatment: (N, T); covariates: (N, T, L); instruments: (N, T, M);
    invariant_covariates: (N, P). Arrays are read-only after construction.
    """

    outcome: np.ndarray
    treatment: np.ndarray
    covariates: np.ndarray
    instruments: np.ndarray
    invariant_covariates: np.ndarray
    unit_ids: tuple = ()
    period_labels: tuple = ()

    def __post_init__(self):
        y = _readonly(self.outcome)
        d = _readonly(self.treatment)
        if y.ndim != 2:
            raise ShapeError(f"outcome must be (N, T), got shape {y.shape}")
        n, t = y.shape
        if d.shape != (n, t):
            raise ShapeError(f"treatment shape {d.shape} != outcome shape {(n, t)}")
        x = _readonly(self.covariates if self.covariates is not None else np.zeros((n, t, 0)))
        z = _readonly(self.instruments if self.instruments is not None else np.zeros((n, t, 0)))
        c = _readonly(
            self.invariant_covariates if self.invariant_covariates is not None else np.zeros((n, 0))
        )
        if x.ndim != 3 or x.shape[:2] != (n, t):
            raise ShapeError(f"covariates must be (N, T, L), got {x.shape}")
        if z.ndim != 3 or z.shape[:2] != (n, t):
            raise ShapeError(f"instruments must be (N, T, M), got {z.shape}")
        if c.ndim != 2 or c.shape[0] != n:
            raise ShapeError(f"invariant covariates must be (N, P), got {c.shape}")
        for name, a in (("outcome", y), ("treatment", d), ("covariates", x),
                        ("instruments", z), ("invariant_covariates", c)):
            if not np.all(np.isfinite(a)):
                raise BalanceError(f"{name} contains non-finite values; panels must be complete")
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "treatment", d)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "instruments", z)
        object.__setattr__(self, "invariant_covariates", c)
        if not self.unit_ids:
            object.__setattr__(self, "unit_ids", tuple(range(n)))
        if not self.period_labels:
            object.__setattr__(self, "period_labels", tuple(range(1, t + 1)))
        if len(self.unit_ids) != n:
            raise ShapeError("unit_ids length does not match N")
        if len(self.period_labels) != t:
            raise ShapeError("period_labels length does not match T")

    @property
    def n_units(self):
        return self.outcome.shape[0]

    @property
    def n_periods(self):
        return self.outcome.shape[1]

    @property
    def n_covariates(self):
        return self.covariates.shape[2]

    @property
    def n_instruments(self):
        return self.instruments.shape[2]

    @property
    def n_invariant(self):
        return self.invariant_covariates.shape[1]


@dataclass(frozen=True)
class ColumnSchema:
    """Column names for load_panel. Covariate/instrument/invariant columns are
    auto-detected from `x_*`, `i_*`, `c_*` prefixes when left as None."""

    unit: str = "unit"
    period: str = "period"
    outcome: str = "y"
    treatment: str = "d"
    covariates: tuple | None = None
    instruments: tuple | None = None
    invariants: tuple | None = None


def _detect(prefix, names):
    found = []
    for name in names:
        if name.startswith(prefix):
            tail = name[len(prefix):]
            if tail.isdigit():
                found.append((int(tail), name))
    found.sort()
    return tuple(name for _, name in found)


def _parse_number(raw, row_index, column):
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ParseError(
            f"row {row_index}: column '{column}' has non-numeric value {raw!r}"
        ) from None


def load_panel(source, schema: ColumnSchema | None = None) -> PanelDataset:
    """Read a long-format CSV (one row per unit-period) into a PanelDataset.

    Requires a balanced panel: every unit observed in every period, periods
    forming a gap-free integer sequence. Row indices in error messages are
    1-based over data rows (header excluded).
    """
    schema = schema or ColumnSchema()
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as handle:
            return load_panel(handle, schema)
    if isinstance(source, bytes):
        return load_panel(io.StringIO(source.decode()), schema)

    reader = csv.DictReader(source)
    if reader.fieldnames is None:
        raise ParseError("empty input: no header row")
    names = [n.strip() for n in reader.fieldnames]
    for required in (schema.unit, schema.period, schema.outcome, schema.treatment):
        if required not in names:
            raise ParseError(f"missing required column '{required}'")
    x_cols = tuple(schema.covariates) if schema.covariates is not None else _detect("x_", names)
    i_cols = tuple(schema.instruments) if schema.instruments is not None else _detect("i_", names)
    c_cols = tuple(schema.invariants) if schema.invariants is not None else _detect("c_", names)

    records = {}
    units_seen = []
    periods_seen = set()
    for row_index, row in enumerate(reader, start=1):
        unit = row.get(schema.unit)
        if unit is None or unit == "":
            raise ParseError(f"row {row_index}: missing unit label")
        raw_period = row.get(schema.period)
        try:
            period = int(str(raw_period).strip())
        except (TypeError, ValueError):
            raise ParseError(
                f"row {row_index}: period label {raw_period!r} is not an integer"
            ) from None
        key = (unit, period)
        if key in records:
            raise DuplicateError(
                f"row {row_index}: duplicate record for unit {unit!r}, period {period}"
            )
        values = (
            _parse_number(row[schema.outcome], row_index, schema.outcome),
            _parse_number(row[schema.treatment], row_index, schema.treatment),
            tuple(_parse_number(row[c], row_index, c) for c in x_cols),
            tuple(_parse_number(row[c], row_index, c) for c in i_cols),
            tuple(_parse_number(row[c], row_index, c) for c in c_cols),
        )
        records[key] = values
        if unit not in periods_seen and unit not in units_seen:
            units_seen.append(unit)
        periods_seen.add(period)

    if not records:
        raise ParseError("no data rows")
    units_seen.sort()   # canonical unit order: content, not row order, decides
    periods = sorted(periods_seen)
    lo, hi = periods[0], periods[-1]
    if periods != list(range(lo, hi + 1)):
        missing = sorted(set(range(lo, hi + 1)) - set(periods))
        raise BalanceError(f"period labels have gaps: missing {missing}")
    n, t = len(units_seen), len(periods)
    for unit in units_seen:
        for period in periods:
            if (unit, period) not in records:
                raise BalanceError(f"unit {unit!r} has no record for period {period}")

    y = np.empty((n, t))
    d = np.empty((n, t))
    x = np.empty((n, t, len(x_cols)))
    z = np.empty((n, t, len(i_cols)))
    c = np.empty((n, len(c_cols)))
    for ui, unit in enumerate(units_seen):
        c_first = None
        for ti, period in enumerate(periods):
            yv, dv, xv, zv, cv = records[(unit, period)]
            y[ui, ti] = yv
            d[ui, ti] = dv
            x[ui, ti, :] = xv
            z[ui, ti, :] = zv
            if c_first is None:
                c_first = cv
            elif cv != c_first:
                raise ParseError(
                    f"unit {unit!r}: invariant covariate changes over time ({c_first} vs {cv})"
                )
        c[ui, :] = c_first
    return PanelDataset(
        outcome=y, treatment=d, covariates=x, instruments=z, invariant_covariates=c,
        unit_ids=tuple(units_seen), period_labels=tuple(periods),
    )


@dataclass(frozen=True)
class FoldPartition:
    """Disjoint exhaustive split of unit indices into K folds (1-based fold ids).

    folds[j] holds the sorted 0-based unit indices of fold j+1.
    """

    folds: tuple
    n_units: int
    seed: int | None = None

    def __post_init__(self):
        folds = tuple(_readonly_int(f) for f in self.folds)
        object.__setattr__(self, "folds", folds)
        seen = np.concatenate(folds) if folds else np.array([], dtype=int)
        if len(np.unique(seen)) != len(seen):
            raise ConfigError("folds overlap")
        if len(seen) != self.n_units or (len(seen) and (seen.min() < 0 or seen.max() >= self.n_units)):
            raise ConfigError("folds do not partition 0..n_units-1")

    @property
    def k(self):
        return len(self.folds)

    def fold(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.k:
            raise DomainError(f"fold index {k} outside 1..{self.k}")
        return self.folds[k - 1]

    def sizes(self):
        return tuple(len(f) for f in self.folds)


def _readonly_int(a):
    a = np.ascontiguousarray(a, dtype=int)
    a.setflags(write=False)
    return a


def split_folds(n_units: int, k: int, seed: int) -> FoldPartition:
    """Seeded near-equal random split. Sizes differ by at most one; the first
    n_units mod k folds get the extra unit. K must be at least 4 because the
    estimation step needs two folds left over after removing (k, k')."""
    if k < 4:
        raise ConfigError(f"need at least 4 folds for cross-fitting, got {k}")
    if n_units < k:
        raise ConfigError(f"cannot split {n_units} units into {k} folds")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    order = rng.permutation(n_units)
    base, extra = divmod(n_units, k)
    folds = []
    start = 0
    for j in range(k):
        size = base + (1 if j < extra else 0)
        folds.append(np.sort(order[start:start + size]))
        start += size
    return FoldPartition(folds=tuple(folds), n_units=n_units, seed=seed)


def fold_successor(k: int, index_set) -> int:
    """Successor map pi(k, A): the next element of A in ascending order, wrapping
    from the largest back to the smallest. Used to pick demeaning partners."""
    members = sorted(set(int(a) for a in index_set))
    if len(members) < 2:
        raise DomainError("successor map needs at least two indices")
    if k not in members:
        raise DomainError(f"index {k} not in {members}")
    pos = members.index(k)
    return members[(pos + 1) % len(members)]


def difference(values: np.ndarray, t: int, s: int) -> np.ndarray:
    """Lag difference v_{it} - v_{i,t-s-1}; removes unit fixed effects.

    values: (N, T) or (N, T, L); returns (N,) or (N, L).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim not in (2, 3):
        raise ShapeError(f"expected (N, T) or (N, T, L), got {values.shape}")
    n_periods = values.shape[1]
    if s < 0:
        raise DomainError(f"lag s must be nonnegative, got {s}")
    base = t - s - 1
    if not 1 <= t <= n_periods:
        raise LagError(f"period t={t} outside 1..{n_periods}")
    if base < 1:
        raise LagError(f"difference at t={t}, s={s} needs period {base} but the panel starts at 1")
    return values[:, t - 1, ...] - values[:, base - 1, ...]


def cross_fold_demean(values: np.ndarray, partition: FoldPartition, k: int, k_prime: int) -> np.ndarray:
    """Subtract the fold-k' mean from the fold-k rows of a per-unit array;
    removes time fixed effects without breaking independence across folds.

    values: (N,) or (N, q) over all units. Returns the demeaned rows of fold k.
    """
    values = np.asarray(values, dtype=float)
    if values.shape[0] != partition.n_units:
        raise ShapeError(
            f"values has {values.shape[0]} rows but the partition covers {partition.n_units} units"
        )
    if k == k_prime:
        raise SelfDemeanError(f"fold {k} cannot be demeaned against itself")
    own = partition.fold(k)
    other = partition.fold(k_prime)
    return values[own, ...] - values[other, ...].mean(axis=0)


def estimation_folds(partition: FoldPartition, k: int):
    """For evaluation fold k: its demeaning partner k' = pi(k, {1..K}) and the
    ascending tuple of estimation fold ids {1..K} minus {k, k'}."""
    all_folds = range(1, partition.k + 1)
    k_prime = fold_successor(k, all_folds)
    rest = tuple(j for j in all_folds if j not in (k, k_prime))
    if len(rest) < 2:
        raise ConfigError(
            f"K={partition.k} leaves fewer than two estimation folds after removing ({k}, {k_prime})"
        )
    return k_prime, rest


def estimation_units(partition: FoldPartition, k: int) -> np.ndarray:
    """Sorted unit indices outside folds k and pi(k, {1..K})."""
    _, rest = estimation_folds(partition, k)
    return np.sort(np.concatenate([partition.fold(j) for j in rest]))


def estimation_demean(values: np.ndarray, partition: FoldPartition, k: int):
    """Cross-fold demeaning inside the estimation set of fold k.

    Each estimation fold k* is demeaned against its successor within the
    reduced ascending fold set, so no unit is demeaned against its own fold
    and folds k, k' never enter. Returns (sorted estimation indices, demeaned
    rows aligned to them)."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != partition.n_units:
        raise ShapeError(
            f"values has {values.shape[0]} rows but the partition covers {partition.n_units} units"
        )
    _, rest = estimation_folds(partition, k)
    out = np.empty_like(values)
    for k_star in rest:
        partner = fold_successor(k_star, rest)
        own = partition.fold(k_star)
        out[own, ...] = values[own, ...] - values[partition.fold(partner), ...].mean(axis=0)
    est_idx = np.sort(np.concatenate([partition.fold(j) for j in rest]))
    return est_idx, out[est_idx, ...]
