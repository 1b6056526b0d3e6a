"""Cross-fitted average-derivative estimators on two-way fixed-effect panels.

The target is theta_0t(s) = E[d gamma_0(V_it) / d D_{i,t-s}]. Unit effects are
removed by the s-lag difference, time effects by demeaning every fold against
its successor fold, and first-stage bias by the Riesz correction:

    theta_hat_debiased = avg over folds k, units i in fold k of
        d gamma_k(V_it)/dD_{i,t-s}
        + alpha_k(Z_it) * (DeltaY*_it - Delta gamma_k*(V_it))

with gamma_k, alpha_k fit on units outside folds k and k'. The plug-in
estimator keeps only the first summand. Standard errors square the estimated
influence contributions, demeaning alpha_k within the evaluation fold.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .data import (
    FoldPartition,
    PanelDataset,
    cross_fold_demean,
    difference,
    estimation_demean,
    estimation_units,
    fold_successor,
)
from .errors import ConfigError, DomainError, NumericError, ShapeError
from .features import (
    Dictionary,
    VariableSpec,
    build_dictionary,
    eval_dictionary,
    eval_dictionary_derivative,
    fit_standardization,
    raw_for_schema,
    v_schema,
    z_schema,
)
from .riesz import estimate_riesz
from .solver import (
    MomentSystem,
    PenaltySpec,
    fit_penalized,
    lasso_system,
)

GAMMA_METHODS = ("penalized-gmm-iv", "lasso", "gmm-iv-unpenalized")

_log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GammaSpec:
    """First-stage recipe: regressor dictionary generators over the V schema,
    instrument generators over the Z schema (IV methods only), method name and
    penalty policy."""

    method: str = "penalized-gmm-iv"
    v_generators: tuple = ()
    z_generators: tuple | None = None
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    standardize: bool = True

    def __post_init__(self):
        if self.method not in GAMMA_METHODS:
            raise ConfigError(f"unknown gamma method {self.method!r}; expected {GAMMA_METHODS}")
        if self.method != "lasso" and self.z_generators is None:
            raise ConfigError(f"method {self.method!r} needs instrument generators")


@dataclass(frozen=True)
class RieszSpec:
    """Riesz-representer recipe: b generators over the Z schema, d generators
    over the V schema, penalty policy, optional GMM weighting."""

    b_generators: tuple = ()
    d_generators: tuple = ()
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    omega: np.ndarray | None = None
    standardize: bool = True


@dataclass(frozen=True)
class GammaEstimate:
    """Fitted structural-function approximation gamma(v) = dict(v)' beta."""

    beta: np.ndarray
    v_dict: Dictionary
    method: str
    fold: int
    penalty: float
    n_iter: int
    kkt_violation: float
    diagnostics: dict

    def value(self, raw_v: np.ndarray) -> np.ndarray:
        return eval_dictionary(self.v_dict, raw_v) @ self.beta

    def derivative(self, raw_v: np.ndarray, wrt: VariableSpec) -> np.ndarray:
        return eval_dictionary_derivative(self.v_dict, raw_v, wrt) @ self.beta


def fit_gamma(panel: PanelDataset, partition: FoldPartition, k: int, t: int,
              s: int, v_dict: Dictionary, z_dict: Dictionary | None,
              method: str = "penalized-gmm-iv",
              penalty: PenaltySpec | None = None, standardize: bool = True,
              cv_seed: int = 0, tol: float = 1e-8,
              max_iter: int = 100000) -> GammaEstimate:
    """Fit gamma_k on the estimation units of fold k.

    IV methods solve min_b (h - A b)' (h - A b) + 2 r |b|_1 with
    A = avg b(Z) Delta dict(V)*' and h = avg b(Z) DeltaY*, built with the same
    per-fold demeaning scheme as the Riesz moments. The lasso regresses
    DeltaY* on Delta dict(V)* directly, ignoring endogeneity.
    gmm-iv-unpenalized is the same IV program pinned at r = 0; paired with
    identity dictionaries it is the deliberately misspecified linear baseline.
    """
    if method not in GAMMA_METHODS:
        raise ConfigError(f"unknown gamma method {method!r}")
    penalty = penalty or PenaltySpec()
    raw_v_t = raw_for_schema(panel, v_dict.schema, t)
    raw_v_base = raw_for_schema(panel, v_dict.schema, t - s - 1)
    est_idx = estimation_units(partition, k)
    if standardize and not v_dict.fitted:
        v_fit = fit_standardization(v_dict, raw_v_t[est_idx])
    else:
        v_fit = v_dict
    delta_feats = eval_dictionary(v_fit, raw_v_t) - eval_dictionary(v_fit, raw_v_base)
    _, dx_star = estimation_demean(delta_feats, partition, k)
    dy = difference(panel.outcome, t, s)
    _, dy_star = estimation_demean(dy, partition, k)
    n_est = len(est_idx)

    if method == "lasso":
        system = lasso_system(dx_star, dy_star)

        def builder(train_idx, val_idx):
            return (lasso_system(dx_star[train_idx], dy_star[train_idx]),
                    lasso_system(dx_star[val_idx], dy_star[val_idx]))
    else:
        if z_dict is None:
            raise ConfigError(f"method {method!r} needs an instrument dictionary")
        raw_z = raw_for_schema(panel, z_dict.schema, t)
        if standardize and not z_dict.fitted:
            z_fit = fit_standardization(z_dict, raw_z[est_idx])
        else:
            z_fit = z_dict
        b_rows = eval_dictionary(z_fit, raw_z[est_idx])
        A = b_rows.T @ dx_star / n_est
        h = b_rows.T @ dy_star / n_est
        system = MomentSystem(G=A, M=h)

        def builder(train_idx, val_idx):
            A_tr = b_rows[train_idx].T @ dx_star[train_idx] / len(train_idx)
            h_tr = b_rows[train_idx].T @ dy_star[train_idx] / len(train_idx)
            A_va = b_rows[val_idx].T @ dx_star[val_idx] / len(val_idx)
            h_va = b_rows[val_idx].T @ dy_star[val_idx] / len(val_idx)
            return MomentSystem(A_tr, h_tr), MomentSystem(A_va, h_va)

    if method == "gmm-iv-unpenalized":
        penalty = PenaltySpec(kind="fixed", value=0.0)
    solution, cv = fit_penalized(system, penalty, builder=builder, n_units=n_est,
                                 seed=cv_seed, tol=tol, max_iter=max_iter)
    if not solution.converged:
        raise NumericError(
            f"gamma solver ({method}) did not converge on fold {k} (t={t}, s={s}): "
            f"kkt violation {solution.kkt_violation:.3e}"
        )
    diagnostics = {
        "n_estimation_units": int(n_est),
        "n_regressors": int(len(v_fit.terms)),
        "n_active": int(np.count_nonzero(solution.rho)),
        "objective_value": float(solution.objective_value),
    }
    return GammaEstimate(
        beta=solution.rho, v_dict=v_fit, method=method, fold=k,
        penalty=solution.penalty, n_iter=solution.n_iter,
        kkt_violation=solution.kkt_violation, diagnostics=diagnostics,
    )


@dataclass(frozen=True)
class FoldPieces:
    """Per-unit evaluation-fold arrays entering the estimator and its variance."""

    fold: int
    units: np.ndarray
    m_term: np.ndarray
    alpha: np.ndarray
    resid_star: np.ndarray


@dataclass(frozen=True)
class EstimateReport:
    estimand: dict
    point: float
    std_error: float
    ci_level: float
    ci_lower: float
    ci_upper: float
    n_units: int
    per_unit_influence: np.ndarray | None
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand,
            "point": self.point,
            "std_error": self.std_error,
            "ci_level": self.ci_level,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "n_units": self.n_units,
            "diagnostics": self.diagnostics,
        }


def _z_quantile(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ConfigError(f"confidence level must be in (0, 1), got {level}")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def _derived_seed(base_seed: int, *path) -> int:
    ss = np.random.SeedSequence((int(base_seed),) + tuple(int(x) for x in path))
    return int(ss.generate_state(1)[0])


def variance_estimate(pieces, theta: float, n_units: int):
    """Influence-based variance: for i in fold k,

        psi_i = m_i - theta + (alpha_i - mean_{fold k} alpha) * resid_i

    and Psi_hat = sum_i psi_i^2 / N. Returns (Psi_hat, per-unit psi array
    indexed by unit)."""
    psi = np.full(n_units, np.nan)
    for piece in pieces:
        alpha_centered = piece.alpha - piece.alpha.mean()
        psi[piece.units] = piece.m_term - theta + alpha_centered * piece.resid_star
    if np.any(np.isnan(psi)):
        raise ShapeError("fold pieces do not cover every unit")
    return float(psi @ psi) / n_units, psi


def _pipeline(panel, partition, t, s, gamma_spec, riesz_spec, model="static",
              q=1, p=0, exogenous_covariates=None, base_seed=0, tol=1e-8,
              max_iter=100000, need_alpha=True, gamma_override=None,
              alpha_override=None):
    """Shared cross-fitting loop. Returns the list of FoldPieces plus per-fold
    diagnostics; the evaluation-fold order is 1..K and unit arrays are the
    partition's sorted fold indices."""
    if partition.n_units != panel.n_units:
        raise ShapeError("partition does not match the panel")
    if gamma_override is None and gamma_spec is None:
        raise ConfigError("need a gamma spec or a gamma override")
    vs = v_schema(panel, q, model, p)
    target = VariableSpec("treatment", s)
    if target not in vs:
        raise DomainError(f"estimand lag s={s} exceeds the treatment lag order q={q}")
    # fail on infeasible lags before any fitting happens
    raw_v_t = raw_for_schema(panel, vs, t)
    raw_v_base = raw_for_schema(panel, vs, t - s - 1)
    zs = raw_z_t = None
    need_z_for_gamma = gamma_override is None and gamma_spec.method != "lasso"
    if need_z_for_gamma or need_alpha:
        zs = z_schema(panel, t, s, model, exogenous_covariates)
        raw_z_t = raw_for_schema(panel, zs, t)

    v_dict = z_dict = b_dict = d_dict = None
    if gamma_override is None:
        v_dict = build_dictionary(gamma_spec.v_generators, vs)
        if gamma_spec.method != "lasso":
            z_dict = build_dictionary(gamma_spec.z_generators, zs)
    if need_alpha and alpha_override is None:
        b_dict = build_dictionary(riesz_spec.b_generators, zs)
        d_dict = build_dictionary(riesz_spec.d_generators, vs)

    dy = difference(panel.outcome, t, s)
    pieces = []
    fold_diags = []
    for k in range(1, partition.k + 1):
        k_prime = fold_successor(k, range(1, partition.k + 1))
        eval_units = partition.fold(k)
        pair_units = np.concatenate([eval_units, partition.fold(k_prime)])
        diag = {"fold": k, "partner": k_prime}

        if gamma_override is None:
            gamma = fit_gamma(
                panel, partition, k, t, s, v_dict, z_dict,
                method=gamma_spec.method, penalty=gamma_spec.penalty,
                standardize=gamma_spec.standardize,
                cv_seed=_derived_seed(base_seed, k, t, s, 0),
                tol=tol, max_iter=max_iter,
            )
            m_term = gamma.derivative(raw_v_t[eval_units], target)
            delta_gamma = np.full(panel.n_units, np.nan)
            delta_gamma[pair_units] = gamma.value(raw_v_t[pair_units]) \
                - gamma.value(raw_v_base[pair_units])
            diag.update(gamma_penalty=float(gamma.penalty),
                        gamma_active=gamma.diagnostics["n_active"],
                        gamma_sweeps=int(gamma.n_iter))
        else:
            m_term = np.asarray(gamma_override.derivative(raw_v_t[eval_units]), dtype=float)
            delta_gamma = np.full(panel.n_units, np.nan)
            delta_gamma[pair_units] = (
                np.asarray(gamma_override.value(raw_v_t[pair_units]), dtype=float)
                - np.asarray(gamma_override.value(raw_v_base[pair_units]), dtype=float)
            )

        dy_star = cross_fold_demean(dy, partition, k, k_prime)
        dgamma_star = cross_fold_demean(delta_gamma, partition, k, k_prime)
        resid_star = dy_star - dgamma_star

        if need_alpha:
            if alpha_override is not None:
                alpha = np.asarray(alpha_override(raw_z_t[eval_units]), dtype=float)
                if alpha.shape != (len(eval_units),):
                    raise ShapeError("alpha override returned a wrong-shaped array")
            else:
                riesz = estimate_riesz(
                    panel, partition, k, t, s, b_dict, d_dict,
                    penalty=riesz_spec.penalty, omega=riesz_spec.omega,
                    standardize=riesz_spec.standardize,
                    cv_seed=_derived_seed(base_seed, k, t, s, 1),
                    tol=tol, max_iter=max_iter,
                )
                alpha = riesz.evaluate(raw_z_t[eval_units])
                diag.update(riesz_penalty=float(riesz.penalty),
                            riesz_active=riesz.diagnostics["n_active"],
                            riesz_moment_gap=float(riesz.moment_gap),
                            riesz_sweeps=int(riesz.n_iter))
        else:
            alpha = np.zeros(len(eval_units))

        pieces.append(FoldPieces(fold=k, units=eval_units, m_term=m_term,
                                 alpha=alpha, resid_star=resid_star))
        fold_diags.append(diag)
        _log.info("fold %d/%d done (t=%d, s=%d): mean derivative %.4f",
                  k, partition.k, t, s, float(np.mean(m_term)))
    return pieces, fold_diags


def _assemble(pieces, n_units):
    """Spread fold pieces into unit-indexed arrays; reductions then run in
    unit-ascending order so fold relabelings cannot move the sums."""
    m_all = np.full(n_units, np.nan)
    alpha_all = np.full(n_units, np.nan)
    resid_all = np.full(n_units, np.nan)
    for piece in pieces:
        m_all[piece.units] = piece.m_term
        alpha_all[piece.units] = piece.alpha
        resid_all[piece.units] = piece.resid_star
    if np.any(np.isnan(m_all)):
        raise ShapeError("fold pieces do not cover every unit")
    return m_all, alpha_all, resid_all


def debiased_theta(panel: PanelDataset, partition: FoldPartition, t: int, s: int,
                   gamma_spec: GammaSpec, riesz_spec: RieszSpec | None = None,
                   model: str = "static", q: int = 1, p: int = 0,
                   exogenous_covariates=None, ci_level: float = 0.95,
                   base_seed: int = 0, tol: float = 1e-8, max_iter: int = 100000,
                   gamma_override=None, alpha_override=None,
                   keep_influence: bool = True) -> EstimateReport:
    """Debiased cross-fitted estimate of theta_0t(s) with influence-based SE."""
    if riesz_spec is None and alpha_override is None:
        raise ConfigError("debiased_theta needs a riesz spec or an alpha override")
    z = _z_quantile(ci_level)
    pieces, fold_diags = _pipeline(
        panel, partition, t, s, gamma_spec, riesz_spec, model=model, q=q, p=p,
        exogenous_covariates=exogenous_covariates, base_seed=base_seed,
        tol=tol, max_iter=max_iter, need_alpha=True,
        gamma_override=gamma_override, alpha_override=alpha_override,
    )
    n = panel.n_units
    m_all, alpha_all, resid_all = _assemble(pieces, n)
    theta = float(np.sum(m_all + alpha_all * resid_all)) / n
    psi_sq, psi = variance_estimate(pieces, theta, n)
    se = math.sqrt(psi_sq / n)
    report = EstimateReport(
        estimand={"kind": "point", "t": int(t), "s": int(s), "estimator": "debiased"},
        point=theta, std_error=se, ci_level=ci_level,
        ci_lower=theta - z * se, ci_upper=theta + z * se, n_units=n,
        per_unit_influence=psi if keep_influence else None,
        diagnostics={"folds": fold_diags},
    )
    return report


def plugin_theta(panel: PanelDataset, partition: FoldPartition, t: int, s: int,
                 gamma_spec: GammaSpec, model: str = "static", q: int = 1,
                 p: int = 0, exogenous_covariates=None, ci_level: float = 0.95,
                 base_seed: int = 0, tol: float = 1e-8, max_iter: int = 100000,
                 gamma_override=None, keep_influence: bool = True) -> EstimateReport:
    """Plug-in estimate: the cross-fitted average of d gamma_k / d D_{i,t-s},
    with the naive variance sum (m_i - theta)^2 / N."""
    z = _z_quantile(ci_level)
    pieces, fold_diags = _pipeline(
        panel, partition, t, s, gamma_spec, None, model=model, q=q, p=p,
        exogenous_covariates=exogenous_covariates, base_seed=base_seed,
        tol=tol, max_iter=max_iter, need_alpha=False,
        gamma_override=gamma_override,
    )
    n = panel.n_units
    m_all, _, _ = _assemble(pieces, n)
    theta = float(np.sum(m_all)) / n
    psi = m_all - theta
    se = math.sqrt(float(psi @ psi) / n / n)
    return EstimateReport(
        estimand={"kind": "point", "t": int(t), "s": int(s), "estimator": "plugin"},
        point=theta, std_error=se, ci_level=ci_level,
        ci_lower=theta - z * se, ci_upper=theta + z * se, n_units=n,
        per_unit_influence=psi if keep_influence else None,
        diagnostics={"folds": fold_diags},
    )


def _aggregate(reports, weights, estimand, ci_level):
    if len(reports) < 1:
        raise ConfigError("nothing to aggregate")
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(reports),):
        raise ShapeError(f"{len(reports)} reports but {weights.shape} weights")
    n = reports[0].n_units
    for rep in reports:
        if rep.n_units != n:
            raise ShapeError("component reports cover different panels")
        if rep.per_unit_influence is None:
            raise ConfigError("component reports must carry per-unit influence")
    stack = np.stack([rep.per_unit_influence for rep in reports])  # (J, N)
    centered = stack - stack.mean(axis=1, keepdims=True)
    sigma = centered @ centered.T / n
    var = float(weights @ sigma @ weights) / n
    if var < 0:
        raise NumericError("aggregate variance came out negative")
    point = float(weights @ np.array([rep.point for rep in reports]))
    se = math.sqrt(var)
    z = _z_quantile(ci_level)
    return EstimateReport(
        estimand=estimand, point=point, std_error=se, ci_level=ci_level,
        ci_lower=point - z * se, ci_upper=point + z * se, n_units=n,
        per_unit_influence=weights @ stack,
        diagnostics={
            "weights": [float(w) for w in weights],
            "components": [rep.estimand for rep in reports],
            "component_points": [float(rep.point) for rep in reports],
            "component_std_errors": [float(rep.std_error) for rep in reports],
        },
    )


def aggregate_over_lags(reports, weights, ci_level: float = 0.95) -> EstimateReport:
    """Weighted combination theta_t = sum_s w_s theta_t(s); the SE uses the
    sample covariance of the stacked per-unit influence contributions, so the
    cross-lag dependence is priced in. All components must come from the same
    partition of the same panel."""
    t_values = {rep.estimand.get("t") for rep in reports}
    if len(t_values) != 1:
        raise ConfigError("lag aggregation needs a common period t")
    estimand = {
        "kind": "lag_aggregate", "t": int(t_values.pop()),
        "s_values": [rep.estimand.get("s") for rep in reports],
    }
    return _aggregate(reports, weights, estimand, ci_level)


def aggregate_over_periods(reports, weights, ci_level: float = 0.95) -> EstimateReport:
    """Weighted combination over evaluation periods at a common lag s."""
    s_values = {rep.estimand.get("s") for rep in reports}
    if len(s_values) != 1:
        raise ConfigError("period aggregation needs a common lag s")
    estimand = {
        "kind": "period_aggregate", "s": int(s_values.pop()),
        "t_values": [rep.estimand.get("t") for rep in reports],
    }
    return _aggregate(reports, weights, estimand, ci_level)
