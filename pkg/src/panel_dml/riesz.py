"""Penalized-GMM estimation of the Riesz representer of the average-derivative
functional on differenced, cross-fold demeaned panels.

For evaluation fold k the representer alpha_k(z) = b(z)' rho_k is fit on the
units outside folds k and k' by matching the empirical moments

    G_k rho ~ M_k,   G_k = avg of Delta d*(V_it) b(Z_it)',
                     M_k = avg of d/dD_{i,t-s} of Delta d*(V_it),

where Delta is the s-lag difference and * the within-estimation-set cross-fold
demeaning. The derivative of Delta d* with respect to D_{i,t-s} collapses to
the derivative of d at the base period alone: the lagged evaluation point and
the demeaning constants contain no D_{i,t-s}, so their derivative is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    PanelDataset,
    FoldPartition,
    estimation_demean,
    estimation_units,
)
from .errors import ConfigError, NumericError
from .features import (
    Dictionary,
    VariableSpec,
    eval_dictionary,
    eval_dictionary_derivative,
    fit_standardization,
    raw_for_schema,
)
from .solver import MomentSystem, PenaltySpec, fit_penalized


def _fit_if_needed(dictionary: Dictionary, raw_rows, standardize: bool) -> Dictionary:
    if dictionary.fitted or not standardize:
        return dictionary
    return fit_standardization(dictionary, raw_rows)


def _riesz_arrays(panel, partition, k, t, s, b_dict, d_dict, standardize=True):
    """Per-estimation-unit ingredients shared by G, M and the CV builder.

    Returns (est_idx, delta_star, b_rows, deriv_rows, fitted b/d dicts).
    """
    raw_v_t = raw_for_schema(panel, d_dict.schema, t)
    raw_v_base = raw_for_schema(panel, d_dict.schema, t - s - 1)
    raw_z = raw_for_schema(panel, b_dict.schema, t)
    est_idx = estimation_units(partition, k)
    d_fit = _fit_if_needed(d_dict, raw_v_t[est_idx], standardize)
    b_fit = _fit_if_needed(b_dict, raw_z[est_idx], standardize)
    delta = eval_dictionary(d_fit, raw_v_t) - eval_dictionary(d_fit, raw_v_base)
    est_idx2, delta_star = estimation_demean(delta, partition, k)
    assert np.array_equal(est_idx, est_idx2)
    b_rows = eval_dictionary(b_fit, raw_z[est_idx])
    target = VariableSpec("treatment", s)
    deriv_rows = eval_dictionary_derivative(d_fit, raw_v_t[est_idx], target)
    return est_idx, delta_star, b_rows, deriv_rows, b_fit, d_fit


def build_G_hat(panel: PanelDataset, partition: FoldPartition, k: int, t: int,
                s: int, b_dict: Dictionary, d_dict: Dictionary,
                standardize: bool = True) -> np.ndarray:
    """Cross-moment matrix (d-dict size, b-dict size) averaged over the
    estimation units of fold k."""
    _, delta_star, b_rows, _, _, _ = _riesz_arrays(
        panel, partition, k, t, s, b_dict, d_dict, standardize
    )
    return delta_star.T @ b_rows / delta_star.shape[0]


def build_M_hat(panel: PanelDataset, partition: FoldPartition, k: int, t: int,
                s: int, d_dict: Dictionary, standardize: bool = True) -> np.ndarray:
    """Target moment vector: the estimation-set average of the analytic
    derivative of each d term with respect to the period-(t-s) treatment,
    using the reduction of the differenced-demeaned derivative."""
    raw_v_t = raw_for_schema(panel, d_dict.schema, t)
    est_idx = estimation_units(partition, k)
    d_fit = _fit_if_needed(d_dict, raw_v_t[est_idx], standardize)
    target = VariableSpec("treatment", s)
    deriv = eval_dictionary_derivative(d_fit, raw_v_t[est_idx], target)
    return deriv.mean(axis=0)


@dataclass(frozen=True)
class RieszEstimate:
    """Fitted representer for one evaluation fold: alpha(z) = b(z)' rho."""

    rho: np.ndarray
    b_dict: Dictionary
    fold: int
    penalty: float
    kkt_violation: float
    n_iter: int
    moment_gap: float
    objective_value: float
    diagnostics: dict

    def evaluate(self, raw_z: np.ndarray) -> np.ndarray:
        return eval_dictionary(self.b_dict, raw_z) @ self.rho


def estimate_riesz(panel: PanelDataset, partition: FoldPartition, k: int, t: int,
                   s: int, b_dict: Dictionary, d_dict: Dictionary,
                   penalty: PenaltySpec | None = None,
                   omega: np.ndarray | None = None,
                   standardize: bool = True, cv_seed: int = 0,
                   tol: float = 1e-8, max_iter: int = 100000) -> RieszEstimate:
    """Fit alpha_k on the estimation units of fold k.

    Standardization of both dictionaries is fitted on estimation units only;
    evaluation on fold k later reuses the stored transforms, so perturbing
    held-out units cannot move the fit. Penalties come from the spec (fixed or
    cross-validated on estimation units). Non-convergence raises NumericError
    with the fold attached.
    """
    penalty = penalty or PenaltySpec()
    est_idx, delta_star, b_rows, deriv_rows, b_fit, _ = _riesz_arrays(
        panel, partition, k, t, s, b_dict, d_dict, standardize
    )
    n_est = len(est_idx)
    G = delta_star.T @ b_rows / n_est
    M = deriv_rows.mean(axis=0)
    system = MomentSystem(G=G, M=M, omega=omega)

    def builder(train_idx, val_idx):
        G_tr = delta_star[train_idx].T @ b_rows[train_idx] / len(train_idx)
        M_tr = deriv_rows[train_idx].mean(axis=0)
        G_va = delta_star[val_idx].T @ b_rows[val_idx] / len(val_idx)
        M_va = deriv_rows[val_idx].mean(axis=0)
        return MomentSystem(G_tr, M_tr, omega), MomentSystem(G_va, M_va, omega)

    solution, cv = fit_penalized(system, penalty, builder=builder, n_units=n_est,
                                 seed=cv_seed, tol=tol, max_iter=max_iter)
    if not solution.converged:
        raise NumericError(
            f"riesz solver did not converge on fold {k} (t={t}, s={s}): "
            f"kkt violation {solution.kkt_violation:.3e} after {solution.n_iter} sweeps"
        )
    moment_gap = float(np.max(np.abs(M - G @ solution.rho)))
    diagnostics = {
        "n_estimation_units": int(n_est),
        "n_moments": int(G.shape[0]),
        "n_basis": int(G.shape[1]),
        "n_active": int(np.count_nonzero(solution.rho)),
        "cv_grid_size": None if cv is None else int(len(cv.grid)),
    }
    return RieszEstimate(
        rho=solution.rho, b_dict=b_fit, fold=k, penalty=solution.penalty,
        kkt_violation=solution.kkt_violation, n_iter=solution.n_iter,
        moment_gap=moment_gap, objective_value=solution.objective_value,
        diagnostics=diagnostics,
    )
