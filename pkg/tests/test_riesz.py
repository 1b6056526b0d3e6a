"""Riesz representer moments: assembly oracles, derivative reduction, isolation."""

import numpy as np
import pytest

from panel_dml import (
    PanelDataset,
    PenaltySpec,
    PowerGen,
    VariableSpec,
    VarSelector,
    build_G_hat,
    build_M_hat,
    build_dictionary,
    derivative_by_period,
    estimate_riesz,
    estimation_demean,
    estimation_units,
    eval_dictionary,
    raw_for_schema,
    split_folds,
    v_schema,
    z_schema,
)


def make_panel(n=12, t=4, n_cov=2, seed=0):
    rng = np.random.default_rng(seed)
    return PanelDataset(
        outcome=rng.normal(size=(n, t)),
        treatment=rng.normal(size=(n, t)),
        covariates=rng.normal(size=(n, t, n_cov)),
        instruments=rng.normal(size=(n, t, 0)),
        invariant_covariates=rng.normal(size=(n, 0)),
    )


def treat_powers(lags_powers):
    return tuple(
        PowerGen(vars=(VarSelector("treatment", lag),), powers=(p,))
        for lag, p in lags_powers
    )


class TestMomentAssembly:
    """Vectorized G against a per-unit outer-product loop."""

    def setup_method(self):
        self.panel = make_panel(n=12, t=4, n_cov=2, seed=7)
        self.partition = split_folds(12, 4, seed=3)
        self.t, self.s, self.k = 3, 0, 2
        self.vs = v_schema(self.panel, q=1)
        self.zs = z_schema(self.panel, self.t, self.s)
        self.d_dict = build_dictionary(
            treat_powers(((0, 1), (0, 2), (1, 1))), self.vs)
        self.b_dict = build_dictionary(
            treat_powers(((1, 1), (2, 1), (1, 2))), self.zs)

    def brute_force_G(self):
        raw_t = raw_for_schema(self.panel, self.vs, self.t)
        raw_base = raw_for_schema(self.panel, self.vs, self.t - self.s - 1)
        delta = eval_dictionary(self.d_dict, raw_t) - eval_dictionary(self.d_dict, raw_base)
        est_idx, delta_star = estimation_demean(delta, self.partition, self.k)
        raw_z = raw_for_schema(self.panel, self.zs, self.t)
        b = eval_dictionary(self.b_dict, raw_z[est_idx])
        G = np.zeros((self.d_dict.size, self.b_dict.size))
        for row in range(len(est_idx)):
            G += np.outer(delta_star[row], b[row])
        return G / len(est_idx)

    def test_G_matches_outer_product_loop(self):
        G = build_G_hat(self.panel, self.partition, self.k, self.t, self.s,
                        self.b_dict, self.d_dict, standardize=False)
        np.testing.assert_allclose(G, self.brute_force_G(), atol=1e-12)

    def test_M_hand_values(self):
        # d terms D_t, D_t^2, D_{t-1}; derivative wrt the period-t treatment
        M = build_M_hat(self.panel, self.partition, self.k, self.t, self.s,
                        self.d_dict, standardize=False)
        est_idx = estimation_units(self.partition, self.k)
        d_now = self.panel.treatment[est_idx, self.t - 1]
        np.testing.assert_allclose(M, [1.0, 2.0 * d_now.mean(), 0.0], atol=1e-14)

    def test_M_zero_for_covariate_only_terms(self):
        d_dict = build_dictionary(
            (PowerGen(vars=(VarSelector("covariate", 0),), powers=(1, 2)),), self.vs)
        M = build_M_hat(self.panel, self.partition, self.k, self.t, self.s,
                        d_dict, standardize=False)
        np.testing.assert_array_equal(M, np.zeros(d_dict.size))

    def test_standardized_M_rescales_by_fitted_sd(self):
        raw_t = raw_for_schema(self.panel, self.vs, self.t)
        est_idx = estimation_units(self.partition, self.k)
        M_raw = build_M_hat(self.panel, self.partition, self.k, self.t, self.s,
                            self.d_dict, standardize=False)
        M_std = build_M_hat(self.panel, self.partition, self.k, self.t, self.s,
                            self.d_dict, standardize=True)
        feats = eval_dictionary(self.d_dict, raw_t[est_idx])
        sds = feats.std(axis=0)
        np.testing.assert_allclose(M_std, M_raw / sds, atol=1e-12)


class TestDerivativeReduction:
    """The derivative of the differenced, demeaned d-features with respect to
    the base-period treatment equals the derivative of the period-t evaluation
    alone: the lagged evaluation point and the demeaning constants do not
    contain that treatment."""

    def test_two_path_identity(self):
        panel = make_panel(n=20, t=5, seed=11)
        partition = split_folds(20, 5, seed=1)
        t, s, k = 4, 1, 3
        vs = v_schema(panel, q=1)
        d_dict = build_dictionary(
            treat_powers(((0, 1), (0, 2), (0, 3), (1, 1), (1, 2))), vs)
        est_idx = estimation_units(partition, k)
        raw_t = raw_for_schema(panel, vs, t)
        raw_base = raw_for_schema(panel, vs, t - s - 1)
        target_period = t - s
        full_path = (
            derivative_by_period(d_dict, raw_t, t, "treatment", target_period)
            - derivative_by_period(d_dict, raw_base, t - s - 1, "treatment", target_period)
        )[est_idx].mean(axis=0)
        reduced = build_M_hat(panel, partition, k, t, s, d_dict, standardize=False)
        assert np.max(np.abs(full_path - reduced)) <= 1e-12

    def test_base_evaluation_contributes_nothing(self):
        panel = make_panel(n=16, t=6, seed=13)
        vs = v_schema(panel, q=1)
        d_dict = build_dictionary(treat_powers(((0, 2), (1, 2))), vs)
        t, s = 5, 1
        raw_base = raw_for_schema(panel, vs, t - s - 1)
        lagged_side = derivative_by_period(d_dict, raw_base, t - s - 1,
                                           "treatment", t - s)
        np.testing.assert_array_equal(lagged_side, 0.0)


class TestCrossFittingIsolation:
    """Moments and the fitted representer for fold k cannot depend on the
    held-out folds k and successor(k)."""

    def perturbed_panel(self, panel, unit_rows):
        treat = panel.treatment.copy()
        outcome = panel.outcome.copy()
        covs = panel.covariates.copy()
        treat[unit_rows] += 37.0
        outcome[unit_rows] -= 11.0
        covs[unit_rows] *= -3.0
        return PanelDataset(outcome=outcome, treatment=treat, covariates=covs,
                            instruments=panel.instruments,
                            invariant_covariates=panel.invariant_covariates)

    def test_heldout_units_are_invisible_bitwise(self):
        panel = make_panel(n=24, t=4, seed=17)
        partition = split_folds(24, 4, seed=5)
        t, s, k = 3, 0, 1
        vs, zs = v_schema(panel, q=1), z_schema(panel, t, s)
        d_dict = build_dictionary(treat_powers(((0, 1), (0, 2), (1, 1))), vs)
        b_dict = build_dictionary(treat_powers(((1, 1), (2, 1))), zs)
        heldout = np.setdiff1d(np.arange(24), estimation_units(partition, k))
        other = self.perturbed_panel(panel, heldout)

        for fn in (build_G_hat, ):
            a = fn(panel, partition, k, t, s, b_dict, d_dict)
            b = fn(other, partition, k, t, s, b_dict, d_dict)
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(
            build_M_hat(panel, partition, k, t, s, d_dict),
            build_M_hat(other, partition, k, t, s, d_dict),
        )
        fit_a = estimate_riesz(panel, partition, k, t, s, b_dict, d_dict,
                               penalty=PenaltySpec(kind="fixed", value=0.01))
        fit_b = estimate_riesz(other, partition, k, t, s, b_dict, d_dict,
                               penalty=PenaltySpec(kind="fixed", value=0.01))
        np.testing.assert_array_equal(fit_a.rho, fit_b.rho)

    def test_estimation_unit_perturbation_moves_the_fit(self):
        panel = make_panel(n=24, t=4, seed=19)
        partition = split_folds(24, 4, seed=5)
        t, s, k = 3, 0, 1
        vs, zs = v_schema(panel, q=1), z_schema(panel, t, s)
        d_dict = build_dictionary(treat_powers(((0, 1), (0, 2))), vs)
        b_dict = build_dictionary(treat_powers(((1, 1), (2, 1))), zs)
        est = estimation_units(partition, k)
        other = self.perturbed_panel(panel, est[:3])
        a = build_G_hat(panel, partition, k, t, s, b_dict, d_dict)
        b = build_G_hat(other, partition, k, t, s, b_dict, d_dict)
        assert np.max(np.abs(a - b)) > 1e-6


class TestEstimateRiesz:
    def setup_method(self):
        self.panel = make_panel(n=40, t=4, seed=23)
        self.partition = split_folds(40, 4, seed=2)
        self.t, self.s, self.k = 3, 0, 1
        self.vs = v_schema(self.panel, q=1)
        self.zs = z_schema(self.panel, self.t, self.s)

    def test_square_unpenalized_solves_exactly(self):
        d_dict = build_dictionary(treat_powers(((0, 1), (0, 2))), self.vs)
        b_dict = build_dictionary(treat_powers(((1, 1), (2, 1))), self.zs)
        fit = estimate_riesz(self.panel, self.partition, self.k, self.t, self.s,
                             b_dict, d_dict, penalty=PenaltySpec(kind="fixed", value=0.0))
        G = build_G_hat(self.panel, self.partition, self.k, self.t, self.s,
                        b_dict, d_dict)
        M = build_M_hat(self.panel, self.partition, self.k, self.t, self.s, d_dict)
        np.testing.assert_allclose(fit.rho, np.linalg.solve(G, M), rtol=1e-8, atol=1e-10)
        assert fit.moment_gap <= 1e-8
        assert fit.diagnostics["cv_grid_size"] is None

    def test_overdetermined_gap_matches_least_squares(self):
        d_dict = build_dictionary(
            treat_powers(((0, 1), (0, 2), (0, 3), (1, 1))), self.vs)
        b_dict = build_dictionary(treat_powers(((1, 1), (2, 1))), self.zs)
        fit = estimate_riesz(self.panel, self.partition, self.k, self.t, self.s,
                             b_dict, d_dict, penalty=PenaltySpec(kind="fixed", value=0.0))
        G = build_G_hat(self.panel, self.partition, self.k, self.t, self.s,
                        b_dict, d_dict)
        M = build_M_hat(self.panel, self.partition, self.k, self.t, self.s, d_dict)
        ls = np.linalg.lstsq(G, M, rcond=None)[0]
        assert fit.moment_gap == pytest.approx(np.max(np.abs(M - G @ ls)), abs=1e-8)

    def test_evaluate_applies_fitted_dictionary(self):
        d_dict = build_dictionary(treat_powers(((0, 1), (0, 2))), self.vs)
        b_dict = build_dictionary(treat_powers(((1, 1), (2, 1))), self.zs)
        fit = estimate_riesz(self.panel, self.partition, self.k, self.t, self.s,
                             b_dict, d_dict, penalty=PenaltySpec(kind="fixed", value=0.05))
        raw_z = raw_for_schema(self.panel, self.zs, self.t)
        expected = eval_dictionary(fit.b_dict, raw_z) @ fit.rho
        np.testing.assert_array_equal(fit.evaluate(raw_z), expected)
        assert fit.b_dict.fitted

    def test_cv_penalty_records_grid(self):
        d_dict = build_dictionary(treat_powers(((0, 1), (0, 2))), self.vs)
        b_dict = build_dictionary(treat_powers(((1, 1), (2, 1))), self.zs)
        fit = estimate_riesz(self.panel, self.partition, self.k, self.t, self.s,
                             b_dict, d_dict, penalty=PenaltySpec(kind="cv", grid_size=8))
        assert fit.diagnostics["cv_grid_size"] == 8
        assert fit.penalty >= 0.0

    def test_moments_shrink_toward_population_with_n(self):
        # G entries are averages over estimation units; quadruple the panel and
        # the spread across independent replicates should tighten noticeably
        def spread(n, seed):
            panel = make_panel(n=n, t=4, seed=seed)
            partition = split_folds(n, 4, seed=0)
            vs, zs = v_schema(panel, q=1), z_schema(panel, 3, 0)
            d_dict = build_dictionary(treat_powers(((0, 1), (0, 2))), vs)
            b_dict = build_dictionary(treat_powers(((1, 1), (2, 1))), zs)
            return build_G_hat(panel, partition, 1, 3, 0, b_dict, d_dict,
                               standardize=False)

        small = np.std([spread(200, s)[0, 0] for s in range(8)], ddof=1)
        large = np.std([spread(3200, s)[0, 0] for s in range(8)], ddof=1)
        assert large < small
