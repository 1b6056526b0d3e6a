"""Synthetic panel generators and the Monte Carlo harness.

Both designs share the noise architecture: unit effects alpha_i ~ N(0,1), time
effects lambda_t ~ N(0,1), idiosyncratic eps_it ~ N(0,1) with eps_i0 = 0,
covariate shocks eps^X_itl ~ N(alpha_i, 1) so covariates load on the unit
effect, and X_itl = eps^X_itl + 0.5 eps_{i,t-1} so covariates feed back on
lagged outcome noise (the endogeneity the instruments have to beat). A burn-in
period t = 0 generated by the same recursions supplies the lag-1 values for
t = 1; the burn-in column is dropped from the returned panel.

All draws come from numpy's PCG64 Generator (standard_normal, Ziggurat) in a
fixed documented order, so a (variant, n_units, n_periods, n_covariates, seed)
tuple pins the panel bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import PanelDataset, split_folds
from .errors import ConfigError, PanelDMLError
from .estimator import (
    aggregate_over_lags,
    aggregate_over_periods,
    debiased_theta,
    plugin_theta,
)
from .presets import is_debiased, preset_specs
from .solver import PenaltySpec

DGP_VARIANTS = ("dgp1", "dgp2")


@dataclass(frozen=True)
class DgpSpec:
    variant: str = "dgp1"
    n_units: int = 1000
    n_periods: int = 10
    n_covariates: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.variant not in DGP_VARIANTS:
            raise ConfigError(f"unknown DGP variant {self.variant!r}")
        if self.n_units < 1 or self.n_periods < 2:
            raise ConfigError("need at least one unit and two periods")
        if self.variant == "dgp2" and self.n_covariates < 4:
            raise ConfigError("dgp2 uses the first four covariates; need n_covariates >= 4")
        if self.n_covariates < 1:
            raise ConfigError("need at least one covariate")


def _xi(n_covariates):
    return np.array([l ** -2.0 for l in range(1, n_covariates + 1)])


def _common_draws(rng, n, t_max, n_cov):
    """Shared latent draws in fixed order: alpha, lambda, eps, eps^X, eps^D.
    Time axis runs 0..t_max with index 0 the burn-in period."""
    alpha = rng.standard_normal(n)
    lam = rng.standard_normal(t_max)                    # lambda_1..lambda_T
    eps = rng.standard_normal((n, t_max))               # eps_1..eps_T; eps_0 = 0
    eps_x = alpha[:, None, None] + rng.standard_normal((n, t_max + 1, n_cov))
    eps_d = 1.0 + rng.standard_normal((n, t_max + 1))
    x = eps_x.copy()
    # X_itl = eps^X_itl + 0.5 * eps_{i,t-1}; eps_{i,-1} = eps_{i,0} = 0
    for tau in range(2, t_max + 1):
        x[:, tau, :] += 0.5 * eps[:, tau - 2][:, None]
    return alpha, lam, eps, eps_x, eps_d, x


def _dgp1_arrays(rng, n, t_max, n_cov):
    alpha, lam, eps, _, eps_d, x = _common_draws(rng, n, t_max, n_cov)
    xi = _xi(n_cov)
    d = x @ xi + eps_d
    y = np.empty((n, t_max + 1))
    y[:, 0] = np.nan  # burn-in outcome is never defined or used
    for tau in range(1, t_max + 1):
        own = d[:, tau] + d[:, tau] ** 2 + d[:, tau] * x[:, tau, 0]
        lagged = d[:, tau - 1] + d[:, tau - 1] ** 2 + d[:, tau - 1] * x[:, tau - 1, 0]
        y[:, tau] = own + 0.5 * lagged + x[:, tau] @ xi + alpha + lam[tau - 1] + eps[:, tau - 1]
    latents = {"alpha": alpha, "lambda": lam, "eps": eps}
    return y, d, x, latents


def _dgp2_arrays(rng, n, t_max, n_cov):
    alpha, lam, eps, _, eps_d, x = _common_draws(rng, n, t_max, n_cov)
    d = x[:, :, 0] / 2.0 - x[:, :, 1] / 3.0 + x[:, :, 2] / 4.0 + eps_d
    y = np.empty((n, t_max + 1))
    y[:, 0] = np.nan
    for tau in range(1, t_max + 1):
        y[:, tau] = (
            d[:, tau] + d[:, tau] ** 2 + d[:, tau - 1] + d[:, tau] * x[:, tau, 0]
            + x[:, tau, 0] ** 2 / 2.0 - np.cos(x[:, tau, 1]) / 3.0
            + np.tanh(x[:, tau, 2]) / 4.0 - np.exp(x[:, tau, 3]) / 5.0
            + alpha + lam[tau - 1] + eps[:, tau - 1]
        )
    latents = {"alpha": alpha, "lambda": lam, "eps": eps}
    return y, d, x, latents


def _simulate_with_latents(spec: DgpSpec):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    maker = _dgp1_arrays if spec.variant == "dgp1" else _dgp2_arrays
    y, d, x, latents = maker(rng, spec.n_units, spec.n_periods, spec.n_covariates)
    panel = PanelDataset(
        outcome=y[:, 1:], treatment=d[:, 1:], covariates=x[:, 1:, :],
        instruments=np.zeros((spec.n_units, spec.n_periods, 0)),
        invariant_covariates=np.zeros((spec.n_units, 0)),
    )
    return panel, latents


def simulate_dgp1(spec: DgpSpec) -> PanelDataset:
    """Quadratic design with a lag-1 structural term and endogenous treatment
    D_it = X_it' xi + eps^D_it, xi_l = l^-2. True average derivatives:
    3 at lag 0, 1.5 at lag 1."""
    if spec.variant != "dgp1":
        raise ConfigError(f"spec is for {spec.variant!r}")
    return _simulate_with_latents(spec)[0]


def simulate_dgp2(spec: DgpSpec) -> PanelDataset:
    """Nonlinear-covariates design (squares, cosine, tanh, exponential) with
    D_it = X_it1/2 - X_it2/3 + X_it3/4 + eps^D_it. True average derivative at
    lag 0 is 3."""
    if spec.variant != "dgp2":
        raise ConfigError(f"spec is for {spec.variant!r}")
    return _simulate_with_latents(spec)[0]


def simulate(spec: DgpSpec) -> PanelDataset:
    return _simulate_with_latents(spec)[0]


@dataclass(frozen=True)
class EstimandSpec:
    """What to estimate: a point theta_t(s), a weighted lag aggregate
    theta_t = sum_s w_s theta_t(s), or a weighted period aggregate."""

    kind: str = "point"
    t: int | None = None
    s: int | None = None
    weights: tuple | None = None
    t_values: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("point", "lag_aggregate", "period_aggregate"):
            raise ConfigError(f"unknown estimand kind {self.kind!r}")
        if self.kind == "point" and (self.t is None or self.s is None):
            raise ConfigError("point estimand needs t and s")
        if self.kind == "lag_aggregate":
            if self.t is None or not self.weights:
                raise ConfigError("lag aggregate needs t and weights")
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.kind == "period_aggregate":
            if self.s is None or not self.weights or not self.t_values:
                raise ConfigError("period aggregate needs s, t_values and weights")
            if len(self.t_values) != len(self.weights):
                raise ConfigError("t_values and weights must align")
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
            object.__setattr__(self, "t_values", tuple(int(t) for t in self.t_values))

    def label(self) -> str:
        if self.kind == "point":
            return f"theta_{self.t}({self.s})"
        if self.kind == "lag_aggregate":
            return f"theta_{self.t}"
        return f"theta(s={self.s})"


def _truth_at_lag(variant: str, s: int) -> float:
    if variant == "dgp1":
        return {0: 3.0, 1: 1.5}.get(s, 0.0)
    return {0: 3.0, 1: 1.0}.get(s, 0.0)


def true_value(variant: str, estimand: EstimandSpec) -> float:
    """Analytic average derivative implied by the structural equations; the
    designs' means are period-invariant so the value depends only on s."""
    if estimand.kind == "point":
        return _truth_at_lag(variant, estimand.s)
    if estimand.kind == "lag_aggregate":
        return float(sum(w * _truth_at_lag(variant, s)
                         for s, w in enumerate(estimand.weights)))
    return float(sum(w * _truth_at_lag(variant, estimand.s)
                     for w in estimand.weights))


def replication_seeds(master_seed: int, r: int):
    """Stable per-replication seed ladder: replication r spawns (dgp seed,
    fold-split seed, pipeline seed) by hashing (master_seed, r). Rerunning a
    single replication standalone reproduces its in-batch result."""
    state = np.random.SeedSequence((int(master_seed), int(r))).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def run_single_replication(dgp: DgpSpec, preset: str, estimand: EstimandSpec,
                           master_seed: int, r: int, k_folds: int = 5,
                           q: int = 1, ci_level: float = 0.95,
                           penalty: PenaltySpec | None = None,
                           riesz_penalty: PenaltySpec | None = None) -> dict:
    """One Monte Carlo replication; returns point/SE/CI floats."""
    dgp_seed, fold_seed, pipe_seed = replication_seeds(master_seed, r)
    panel = simulate(replace(dgp, seed=dgp_seed))
    partition = split_folds(panel.n_units, k_folds, fold_seed)

    def run_point(t, s, keep_influence):
        gamma_spec, riesz_spec, debiased = preset_specs(
            preset, s, penalty=penalty, riesz_penalty=riesz_penalty
        )
        if debiased:
            return debiased_theta(panel, partition, t, s, gamma_spec, riesz_spec,
                                  q=q, ci_level=ci_level, base_seed=pipe_seed,
                                  keep_influence=keep_influence)
        return plugin_theta(panel, partition, t, s, gamma_spec, q=q,
                            ci_level=ci_level, base_seed=pipe_seed,
                            keep_influence=keep_influence)

    if estimand.kind == "point":
        report = run_point(estimand.t, estimand.s, keep_influence=False)
    elif estimand.kind == "lag_aggregate":
        parts = [run_point(estimand.t, s, keep_influence=True)
                 for s in range(len(estimand.weights))]
        report = aggregate_over_lags(parts, estimand.weights, ci_level=ci_level)
    else:
        parts = [run_point(t, estimand.s, keep_influence=True)
                 for t in estimand.t_values]
        report = aggregate_over_periods(parts, estimand.weights, ci_level=ci_level)
    return {
        "point": report.point, "std_error": report.std_error,
        "ci_lower": report.ci_lower, "ci_upper": report.ci_upper,
    }


@dataclass(frozen=True)
class McResult:
    dgp: DgpSpec
    preset: str
    estimand: EstimandSpec
    truth: float
    ci_level: float
    n_requested: int
    estimates: np.ndarray
    std_errors: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    covered: np.ndarray
    replication_ids: np.ndarray
    failures: tuple
    metrics: dict


def summarize_metrics(estimates, std_errors, covered, truth,
                      n_requested: int) -> dict:
    """Monte Carlo summary. Spread uses the (R-1) sample convention, so
    MSE = bias^2 + var * (R-1)/R holds as an identity."""
    r_ok = len(estimates)
    out = {
        "n_effective": int(r_ok),
        "n_excluded": int(n_requested - r_ok),
        "truth": float(truth),
    }
    if r_ok == 0:
        out.update(mean_estimate=float("nan"), bias=float("nan"),
                   abs_bias=float("nan"), std_dev=float("nan"),
                   mse=float("nan"), mean_est_sd=float("nan"),
                   coverage=float("nan"), mc_se=float("nan"))
        return out
    mean_est = float(np.mean(estimates))
    bias = mean_est - truth
    if r_ok >= 2:
        std_dev = float(np.std(estimates, ddof=1))
        mc_se = std_dev / np.sqrt(r_ok)
    else:
        std_dev = float("nan")
        mc_se = float("nan")
    out.update(
        mean_estimate=mean_est,
        bias=float(bias),
        abs_bias=float(abs(bias)),
        std_dev=std_dev,
        mse=float(np.mean((np.asarray(estimates) - truth) ** 2)),
        mean_est_sd=float(np.mean(std_errors)),
        coverage=float(np.mean(covered)),
        mc_se=float(mc_se),
    )
    return out


def run_monte_carlo(dgp: DgpSpec, preset: str, estimand: EstimandSpec,
                    replications: int, master_seed: int, k_folds: int = 5,
                    q: int = 1, ci_level: float = 0.95, n_jobs: int = 1,
                    penalty: PenaltySpec | None = None,
                    riesz_penalty: PenaltySpec | None = None,
                    _runner=None) -> McResult:
    """Monte Carlo study of one (DGP, preset, estimand) cell.

    Replications failing with a package error (typically solver
    non-convergence) are excluded from the summary and reported in
    `failures`; everything else is deterministic given master_seed.
    """
    if replications < 1:
        raise ConfigError("need at least one replication")
    runner = _runner or run_single_replication

    def task(r):
        try:
            return r, runner(dgp, preset, estimand, master_seed, r,
                             k_folds=k_folds, q=q, ci_level=ci_level,
                             penalty=penalty, riesz_penalty=riesz_penalty), None
        except PanelDMLError as exc:
            return r, None, f"{type(exc).__name__}: {exc}"

    if n_jobs == 1:
        raw = [task(r) for r in range(replications)]
    else:
        from joblib import Parallel, delayed
        raw = Parallel(n_jobs=n_jobs)(delayed(task)(r) for r in range(replications))

    truth = true_value(dgp.variant, estimand)
    kept, failures = [], []
    for r, result, message in raw:
        if result is None:
            failures.append((r, message))
        else:
            kept.append((r, result))
    ids = np.array([r for r, _ in kept], dtype=int)
    est = np.array([res["point"] for _, res in kept])
    sds = np.array([res["std_error"] for _, res in kept])
    lo = np.array([res["ci_lower"] for _, res in kept])
    hi = np.array([res["ci_upper"] for _, res in kept])
    covered = (lo <= truth) & (truth <= hi)
    metrics = summarize_metrics(est, sds, covered, truth, replications)
    return McResult(
        dgp=dgp, preset=preset, estimand=estimand, truth=truth,
        ci_level=ci_level, n_requested=replications, estimates=est,
        std_errors=sds, ci_lower=lo, ci_upper=hi, covered=covered,
        replication_ids=ids, failures=tuple(failures), metrics=metrics,
    )
