"""Raw regressor assembly and polynomial dictionaries.

Raw vectors hold levels only. A schema (tuple of VariableSpec) names each
column by role, lag relative to the base period, and component index; the same
schema can be evaluated at different base periods, which is what the
differencing transform relies on. Dictionaries map a raw matrix to basis
features (monomials), with optional standardization fitted on a sample.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .data import PanelDataset
from .errors import ConfigError, DomainError, LagError, ShapeError

ROLES = ("outcome_lag", "treatment", "covariate", "instrument", "invariant")
DEGENERATE_SD = 1e-12


@dataclass(frozen=True, order=True)
class VariableSpec:
    """One raw column: a role, a lag relative to the base period (lag 0 = the
    base period itself; invariants ignore the lag), and a component index."""

    role: str
    lag: int
    component: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"unknown role {self.role!r}; expected one of {ROLES}")


def v_schema(panel: PanelDataset, q: int, model: str = "static", p: int = 0):
    """Schema of the structural-function argument V_it: covariate and treatment
    blocks over periods t-q..t, invariants, and for the dynamic model lagged
    outcomes over t-1-p..t-1. Blocks are ordered by ascending period."""
    if model not in ("static", "dynamic"):
        raise ConfigError(f"model must be 'static' or 'dynamic', got {model!r}")
    if q < 0 or p < 0:
        raise ConfigError("lag orders q and p must be nonnegative")
    specs = []
    if model == "dynamic":
        for lag in range(p + 1, 0, -1):
            specs.append(VariableSpec("outcome_lag", lag))
    for lag in range(q, -1, -1):
        for comp in range(panel.n_covariates):
            specs.append(VariableSpec("covariate", lag, comp))
    for lag in range(q, -1, -1):
        specs.append(VariableSpec("treatment", lag))
    for comp in range(panel.n_invariant):
        specs.append(VariableSpec("invariant", 0, comp))
    return tuple(specs)


def z_schema(panel: PanelDataset, t: int, s: int, model: str = "static",
             exogenous_covariates=None):
    """Schema of the conditioning set Z_it: full histories up to period t-s-1
    (exogenous covariates, treatments, instruments), invariants, and for the
    dynamic model outcomes up to t-s-2. Histories are truncated at period 1."""
    if model not in ("static", "dynamic"):
        raise ConfigError(f"model must be 'static' or 'dynamic', got {model!r}")
    cutoff = t - s - 1
    if cutoff < 1:
        raise LagError(f"Z at t={t}, s={s} has no history: t-s-1 = {cutoff} < 1")
    if exogenous_covariates is None:
        exogenous_covariates = range(panel.n_covariates)
    exogenous_covariates = tuple(exogenous_covariates)
    for comp in exogenous_covariates:
        if not 0 <= comp < panel.n_covariates:
            raise DomainError(f"covariate component {comp} outside 0..{panel.n_covariates - 1}")
    specs = []
    if model == "dynamic":
        if cutoff - 1 < 1:
            raise LagError(f"dynamic Z at t={t}, s={s} needs outcomes up to period {cutoff - 1}")
        for period in range(1, cutoff):
            specs.append(VariableSpec("outcome_lag", t - period))
    for period in range(1, cutoff + 1):
        for comp in exogenous_covariates:
            specs.append(VariableSpec("covariate", t - period, comp))
    for period in range(1, cutoff + 1):
        specs.append(VariableSpec("treatment", t - period))
    for period in range(1, cutoff + 1):
        for comp in range(panel.n_instruments):
            specs.append(VariableSpec("instrument", t - period, comp))
    for comp in range(panel.n_invariant):
        specs.append(VariableSpec("invariant", 0, comp))
    return tuple(specs)


def raw_for_schema(panel: PanelDataset, schema, base_t: int) -> np.ndarray:
    """Evaluate a schema at a base period: column j holds the level of
    schema[j] at period base_t - lag. Raises LagError when that period is
    outside the panel."""
    n = panel.n_units
    out = np.empty((n, len(schema)))
    for j, spec in enumerate(schema):
        if spec.role == "invariant":
            out[:, j] = panel.invariant_covariates[:, spec.component]
            continue
        period = base_t - spec.lag
        if not 1 <= period <= panel.n_periods:
            raise LagError(
                f"{spec.role} at lag {spec.lag} from base period {base_t} "
                f"needs period {period}, panel covers 1..{panel.n_periods}"
            )
        col = period - 1
        if spec.role == "treatment":
            out[:, j] = panel.treatment[:, col]
        elif spec.role == "covariate":
            out[:, j] = panel.covariates[:, col, spec.component]
        elif spec.role == "instrument":
            out[:, j] = panel.instruments[:, col, spec.component]
        elif spec.role == "outcome_lag":
            out[:, j] = panel.outcome[:, col]
        else:  # pragma: no cover - VariableSpec validates roles
            raise ConfigError(f"unhandled role {spec.role!r}")
    return out


def assemble_V(panel: PanelDataset, t: int, q: int, model: str = "static", p: int = 0):
    """Raw V_it matrix for all units plus its schema."""
    schema = v_schema(panel, q, model, p)
    return raw_for_schema(panel, schema, t), schema


def assemble_Z(panel: PanelDataset, t: int, s: int, model: str = "static",
               exogenous_covariates=None):
    """Raw Z_it matrix for all units plus its schema."""
    schema = z_schema(panel, t, s, model, exogenous_covariates)
    return raw_for_schema(panel, schema, t), schema


# ---------------------------------------------------------------------------
# dictionary generators

@dataclass(frozen=True)
class VarSelector:
    """Selects schema columns by role and lag; component None means all
    components with that role and lag."""

    role: str
    lag: int
    component: int | None = None


@dataclass(frozen=True)
class PowerGen:
    """Each selected variable raised to each power."""

    vars: tuple
    powers: tuple


@dataclass(frozen=True)
class InteractionGen:
    """Grid of products left^j * right^k over the selected variable lists."""

    left: tuple
    right: tuple
    left_powers: tuple
    right_powers: tuple


@dataclass(frozen=True)
class FullPolyGen:
    """All monomials in the selected variables with total degree 1..max_degree."""

    vars: tuple
    max_degree: int


@dataclass(frozen=True)
class InterceptGen:
    """The constant term."""


@dataclass(frozen=True)
class BasisTerm:
    """A monomial over schema columns. factors is a canonical tuple of
    (VariableSpec, power) pairs; the empty tuple is the intercept."""

    factors: tuple

    @property
    def is_intercept(self):
        return len(self.factors) == 0

    def degree(self):
        return sum(p for _, p in self.factors)


def _canonical_term(pairs):
    merged = {}
    for spec, power in pairs:
        if power < 0:
            raise ConfigError(f"negative power {power}")
        if power == 0:
            continue
        merged[spec] = merged.get(spec, 0) + power
    factors = tuple(sorted(merged.items(), key=lambda it: (it[0], it[1])))
    return BasisTerm(factors=factors)


def _resolve(selector: VarSelector, schema):
    hits = [
        spec for spec in schema
        if spec.role == selector.role and spec.lag == selector.lag
        and (selector.component is None or spec.component == selector.component)
    ]
    if not hits:
        raise ConfigError(
            f"selector (role={selector.role}, lag={selector.lag}, "
            f"component={selector.component}) matches nothing in the schema"
        )
    return hits


def _resolve_many(selectors, schema):
    out = []
    for sel in selectors:
        out.extend(_resolve(sel, schema))
    return out


@dataclass(frozen=True)
class Dictionary:
    """Ordered basis terms over a schema, with optional standardization state.

    Immutable; fit_standardization returns a new fitted instance. Term order is
    a pure function of the generator list.
    """

    schema: tuple
    terms: tuple
    means: np.ndarray | None = None
    scales: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    @property
    def fitted(self):
        return self.means is not None

    @property
    def size(self):
        return len(self.terms)

    def column_of(self, spec: VariableSpec) -> int:
        try:
            return self.schema.index(spec)
        except ValueError:
            raise DomainError(f"{spec} is not in the dictionary schema") from None


def build_dictionary(generators, schema) -> Dictionary:
    """Expand generator blocks over a schema into a deduplicated Dictionary.
    Duplicate monomials keep their first position."""
    seen = {}
    order = []
    for gen in generators:
        if isinstance(gen, InterceptGen):
            candidates = [BasisTerm(factors=())]
        elif isinstance(gen, PowerGen):
            variables = _resolve_many(gen.vars, schema)
            candidates = [
                _canonical_term([(v, int(p))])
                for v in variables for p in gen.powers
            ]
        elif isinstance(gen, InteractionGen):
            lefts = _resolve_many(gen.left, schema)
            rights = _resolve_many(gen.right, schema)
            candidates = [
                _canonical_term([(a, int(j)), (b, int(k))])
                for a in lefts for b in rights
                for j in gen.left_powers for k in gen.right_powers
            ]
        elif isinstance(gen, FullPolyGen):
            variables = _resolve_many(gen.vars, schema)
            candidates = []
            for degree in range(1, gen.max_degree + 1):
                for combo in itertools.combinations_with_replacement(variables, degree):
                    candidates.append(_canonical_term([(v, 1) for v in combo]))
        else:
            raise ConfigError(f"unknown generator {type(gen).__name__}")
        for term in candidates:
            if term not in seen:
                seen[term] = True
                order.append(term)
    if not order:
        raise ConfigError("dictionary has no terms")
    return Dictionary(schema=tuple(schema), terms=tuple(order))


def _term_columns(dictionary: Dictionary):
    cols = []
    for term in dictionary.terms:
        cols.append(tuple((dictionary.schema.index(spec), power) for spec, power in term.factors))
    return cols


def _eval_raw_terms(dictionary: Dictionary, raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != len(dictionary.schema):
        raise ShapeError(
            f"raw matrix has shape {raw.shape}, schema expects {len(dictionary.schema)} columns"
        )
    n = raw.shape[0]
    out = np.empty((n, dictionary.size))
    for j, cols in enumerate(_term_columns(dictionary)):
        if not cols:
            out[:, j] = 1.0
            continue
        acc = None
        for col, power in cols:
            factor = raw[:, col] if power == 1 else raw[:, col] ** power
            acc = factor.copy() if acc is None else acc * factor
        out[:, j] = acc
    return out


def fit_standardization(dictionary: Dictionary, raw_sample: np.ndarray) -> Dictionary:
    """Fit per-term location/scale on a sample (population-sd convention).

    Intercept terms are exempt. Terms with sd below 1e-12 are flagged
    degenerate and given scale 1 so they pass through unshrunk by accident
    rather than exploding."""
    if dictionary.fitted:
        raise ConfigError("dictionary is already fitted")
    feats = _eval_raw_terms(dictionary, raw_sample)
    means = feats.mean(axis=0)
    scales = feats.std(axis=0)  # ddof=0
    degenerate = scales < DEGENERATE_SD
    scales = np.where(degenerate, 1.0, scales)
    for j, term in enumerate(dictionary.terms):
        if term.is_intercept:
            means[j], scales[j], degenerate[j] = 0.0, 1.0, False
    return Dictionary(
        schema=dictionary.schema, terms=dictionary.terms,
        means=means, scales=scales, degenerate=degenerate,
    )


def eval_dictionary(dictionary: Dictionary, raw: np.ndarray) -> np.ndarray:
    """Feature matrix (n, size). A fitted dictionary applies its stored
    transforms; an unfitted one returns raw monomials."""
    feats = _eval_raw_terms(dictionary, raw)
    if dictionary.fitted:
        feats = (feats - dictionary.means) / dictionary.scales
    return feats


def eval_dictionary_derivative(dictionary: Dictionary, raw: np.ndarray,
                               wrt: VariableSpec) -> np.ndarray:
    """Per-term analytic derivative with respect to one schema variable,
    shape (n, size). Standardization divides by the stored scale; the location
    shift has zero derivative."""
    col = dictionary.column_of(wrt)
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != len(dictionary.schema):
        raise ShapeError(
            f"raw matrix has shape {raw.shape}, schema expects {len(dictionary.schema)} columns"
        )
    n = raw.shape[0]
    out = np.zeros((n, dictionary.size))
    for j, term in enumerate(dictionary.terms):
        hit = None
        for spec, power in term.factors:
            if dictionary.schema.index(spec) == col:
                hit = (spec, power)
                break
        if hit is None:
            continue
        spec, power = hit
        x = raw[:, col]
        deriv = float(power) * (x ** (power - 1) if power > 1 else np.ones(n))
        for other, opower in term.factors:
            if other == spec:
                continue
            ocol = dictionary.schema.index(other)
            deriv = deriv * (raw[:, ocol] if opower == 1 else raw[:, ocol] ** opower)
        out[:, j] = deriv
    if dictionary.fitted:
        out = out / dictionary.scales
    return out


def derivative_by_period(dictionary: Dictionary, raw: np.ndarray, base_t: int,
                         role: str, period: int, component: int = 0) -> np.ndarray:
    """Derivative with respect to the physical variable (role, period,
    component) of features evaluated at base period base_t. Returns zeros when
    that variable does not appear in the schema at this base period; this is
    the containment logic behind the derivative-reduction identity."""
    target = VariableSpec(role, base_t - period, component)
    if target not in dictionary.schema:
        n = np.asarray(raw).shape[0]
        return np.zeros((n, dictionary.size))
    return eval_dictionary_derivative(dictionary, raw, target)
