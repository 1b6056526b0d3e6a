"""Numerical check that the debiased moment is insensitive to first-stage error.

Perturb the fitted nuisances jointly, gamma_hat + eps * dgamma and
alpha_hat + eps * dalpha, and trace how the two estimators move. The debiased
estimate has zero Gateaux derivative at the truth in each nuisance direction,
so its shift is dominated by the eps^2 cross term; the plug-in estimate moves
linearly because its only channel is the derivative of the gamma perturbation.
On a log-log plot of |mean shift| against eps the debiased slope should sit
near 2 and the plug-in slope at exactly 1.

The directions live in the right function spaces and need no refitting:

    dgamma(V_it) = c * D_it + w * D_{i,t-1}^2
    dalpha(Z_it) = -w * (D_{i,t-1}^2 - D_{i,t-2}^2)

dgamma's derivative in D_{i,t-s} is the constant c (for s = 0), shifting the
plug-in term exactly by eps * c, while its lag-square part is Z-measurable and
pairs against dalpha in the eps^2 coefficient with a positive sign. The square
terms carry the curvature, so w controls the quadratic channel (w^2) faster
than the residual linear leakage (w); the default w = 1 keeps the two regimes
cleanly separated at the smallest eps.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .data import cross_fold_demean, fold_successor, split_folds
from .errors import ConfigError, PanelDMLError
from .estimator import _pipeline
from .presets import preset_specs
from .simulation import DgpSpec, replication_seeds, simulate

DEFAULT_EPS_GRID = (0.05, 0.1, 0.2, 0.4)


def _direction_columns(panel, t, s, c, w):
    """Per-unit pieces of the perturbation at evaluation period t.

    Returns (delta_gamma at base t, delta_gamma at base t-s-1, dalpha), each
    (N,). dgamma evaluated at V_i,tau is c*D_tau + w*D_{tau-1}^2 in physical
    lags, so both evaluation points reach back to D_{t-s-2}.
    """
    d = panel.treatment

    def dgamma_at(tau):
        return c * d[:, tau - 1] + w * d[:, tau - 2] ** 2

    g_t = dgamma_at(t)
    g_base = dgamma_at(t - s - 1)
    dalpha = -w * (d[:, t - 2] ** 2 - d[:, t - 3] ** 2)
    return g_t, g_base, dalpha


def perturbed_estimates(panel, partition, t, s, gamma_spec, riesz_spec,
                        eps_grid, c=1.0, w=1.0, q=1, base_seed=0):
    """Fit the nuisances once, then sweep eps analytically.

    The perturbed debiased estimate is

        mean_i[(m_i + eps*c) + (alpha_i + eps*dalpha_i)(resid_i - eps*Ddg*_i)]

    where Ddg*_i is the differenced, cross-fold demeaned dgamma
    (the same transform the pipeline applies to gamma itself).
    Returns (debiased(eps), plugin(eps)) arrays aligned with eps_grid.
    """
    if s != 0:
        raise ConfigError("the perturbation directions assume s = 0")
    pieces, _ = _pipeline(
        panel, partition, t, s, gamma_spec, riesz_spec, q=q,
        base_seed=base_seed, need_alpha=True,
    )
    g_t, g_base, dalpha_all = _direction_columns(panel, t, s, c, w)
    delta_g = g_t - g_base

    n = panel.n_units
    m = np.empty(n)
    alpha = np.empty(n)
    resid = np.empty(n)
    ddg_star = np.empty(n)
    dalpha = np.empty(n)
    filled = np.zeros(n, dtype=bool)
    for piece in pieces:
        _, star = _demean_direction(delta_g, partition, piece.fold)
        m[piece.units] = piece.m_term
        alpha[piece.units] = piece.alpha
        resid[piece.units] = piece.resid_star
        ddg_star[piece.units] = star
        dalpha[piece.units] = dalpha_all[piece.units]
        filled[piece.units] = True
    assert filled.all()

    eps = np.asarray(eps_grid, dtype=float)
    debiased = np.array([
        np.mean((m + e * c) + (alpha + e * dalpha) * (resid - e * ddg_star))
        for e in eps
    ])
    plugin = np.array([np.mean(m) + e * c for e in eps])
    return debiased, plugin


def _demean_direction(values, partition, k):
    """Apply the evaluation-fold demeaning (against the successor fold) to a
    per-unit column, mirroring what the pipeline does to gamma residuals."""
    k_prime = fold_successor(k, range(1, partition.k + 1))
    star = cross_fold_demean(values[:, None], partition, k, k_prime)
    return k_prime, star[:, 0]


def orthogonality_experiment(n_units=500, replications=40, master_seed=0,
                             eps_grid=DEFAULT_EPS_GRID, t=None, s=0, q=1,
                             k_folds=5, c=1.0, w=1.0, n_periods=10,
                             n_covariates=5, penalty=None, riesz_penalty=None,
                             n_jobs=1) -> dict:
    """Monte Carlo version of the perturbation sweep on the quadratic design.

    Averages the eps-induced shifts over replications (the base estimates
    difference out, so only the perturbation terms and their sampling noise
    remain), then fits log-log slopes.
    """
    if t is None:
        t = n_periods
    eps = np.asarray(eps_grid, dtype=float)
    dgp = DgpSpec("dgp1", n_units, n_periods, n_covariates)

    def task(r):
        dgp_seed, fold_seed, pipe_seed = replication_seeds(master_seed, r)
        panel = simulate(replace(dgp, seed=dgp_seed))
        partition = split_folds(panel.n_units, k_folds, fold_seed)
        gamma_spec, riesz_spec, _ = preset_specs(
            "DPGMM", s, penalty=penalty, riesz_penalty=riesz_penalty
        )
        try:
            deb, plug = perturbed_estimates(
                panel, partition, t, s, gamma_spec, riesz_spec,
                np.concatenate(([0.0], eps)), c=c, w=w, q=q,
                base_seed=pipe_seed,
            )
        except PanelDMLError as exc:
            return r, None, None, f"{type(exc).__name__}: {exc}"
        return r, deb[1:] - deb[0], plug[1:] - plug[0], None

    if n_jobs == 1:
        raw = [task(r) for r in range(replications)]
    else:
        from joblib import Parallel, delayed
        raw = Parallel(n_jobs=n_jobs)(delayed(task)(r) for r in range(replications))

    deb_shifts, plug_shifts, failures = [], [], []
    for r, deb, plug, message in raw:
        if deb is None:
            failures.append((r, message))
        else:
            deb_shifts.append(deb)
            plug_shifts.append(plug)
    deb_shifts = np.asarray(deb_shifts)
    plug_shifts = np.asarray(plug_shifts)
    mean_deb = np.abs(deb_shifts.mean(axis=0))
    mean_plug = np.abs(plug_shifts.mean(axis=0))
    deb_slope = float(np.polyfit(np.log(eps), np.log(mean_deb), 1)[0])
    plug_slope = float(np.polyfit(np.log(eps), np.log(mean_plug), 1)[0])
    return {
        "eps": eps,
        "debiased_shift": mean_deb,
        "plugin_shift": mean_plug,
        "debiased_slope": deb_slope,
        "plugin_slope": plug_slope,
        "n_effective": len(deb_shifts),
        "failures": tuple(failures),
    }
