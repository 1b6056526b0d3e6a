"""Synthetic designs and the Monte Carlo harness."""

import numpy as np
import pytest

from panel_dml import (
    ConfigError,
    DgpSpec,
    EstimandSpec,
    McResult,
    NumericError,
    replication_seeds,
    run_monte_carlo,
    run_single_replication,
    simulate,
    simulate_dgp1,
    simulate_dgp2,
    summarize_metrics,
    true_value,
)
from panel_dml.simulation import _simulate_with_latents, _xi


class TestDgpStructure:
    """Reconstruct each outcome equation from the panel and the latent draws;
    the generator must satisfy its own structural equations exactly."""

    def test_dgp1_outcome_identity(self):
        spec = DgpSpec("dgp1", n_units=50, n_periods=5, n_covariates=3, seed=4)
        panel, lat = _simulate_with_latents(spec)
        xi = _xi(3)
        d, x, y = panel.treatment, panel.covariates, panel.outcome
        alpha, lam, eps = lat["alpha"], lat["lambda"], lat["eps"]
        for j in range(1, 5):  # panel column j = period j+1
            own = d[:, j] + d[:, j] ** 2 + d[:, j] * x[:, j, 0]
            lag = d[:, j - 1] + d[:, j - 1] ** 2 + d[:, j - 1] * x[:, j - 1, 0]
            expected = own + 0.5 * lag + x[:, j] @ xi + alpha + lam[j] + eps[:, j]
            np.testing.assert_allclose(y[:, j], expected, atol=1e-12)

    def test_dgp2_outcome_identity(self):
        spec = DgpSpec("dgp2", n_units=50, n_periods=5, n_covariates=5, seed=9)
        panel, lat = _simulate_with_latents(spec)
        d, x, y = panel.treatment, panel.covariates, panel.outcome
        alpha, lam, eps = lat["alpha"], lat["lambda"], lat["eps"]
        for j in range(1, 5):
            expected = (
                d[:, j] + d[:, j] ** 2 + d[:, j - 1] + d[:, j] * x[:, j, 0]
                + x[:, j, 0] ** 2 / 2.0 - np.cos(x[:, j, 1]) / 3.0
                + np.tanh(x[:, j, 2]) / 4.0 - np.exp(x[:, j, 3]) / 5.0
                + alpha + lam[j] + eps[:, j]
            )
            np.testing.assert_allclose(y[:, j], expected, atol=1e-12)

    def test_dgp1_treatment_equation_moments(self):
        spec = DgpSpec("dgp1", n_units=4000, n_periods=6, n_covariates=5, seed=1)
        panel = simulate_dgp1(spec)
        xi = _xi(5)
        resid = panel.treatment - panel.covariates @ xi
        # eps^D ~ N(1, 1) iid across (i, t)
        assert abs(resid.mean() - 1.0) < 4.0 / np.sqrt(resid.size)
        assert abs(resid.std() - 1.0) < 0.05

    def test_covariates_load_on_unit_effect(self):
        spec = DgpSpec("dgp1", n_units=4000, n_periods=6, n_covariates=3, seed=2)
        panel, lat = _simulate_with_latents(spec)
        alpha = lat["alpha"]
        # Cov(X_itl, alpha_i) = Var(alpha) = 1 for every l and t
        cov = np.mean(panel.covariates * alpha[:, None, None])
        assert abs(cov - 1.0) < 4.0 * np.sqrt(5.0 / spec.n_units)

    def test_shapes_and_finiteness(self):
        panel = simulate(DgpSpec("dgp1", 30, 7, 4, seed=0))
        assert panel.outcome.shape == (30, 7)
        assert panel.treatment.shape == (30, 7)
        assert panel.covariates.shape == (30, 7, 4)
        assert np.all(np.isfinite(panel.outcome))

    def test_bitwise_reproducible_and_seed_sensitive(self):
        spec = DgpSpec("dgp2", 20, 4, 4, seed=33)
        a, b = simulate(spec), simulate(spec)
        np.testing.assert_array_equal(a.outcome, b.outcome)
        np.testing.assert_array_equal(a.covariates, b.covariates)
        c = simulate(DgpSpec("dgp2", 20, 4, 4, seed=34))
        assert np.max(np.abs(a.outcome - c.outcome)) > 1e-6

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            DgpSpec("dgp3")
        with pytest.raises(ConfigError):
            DgpSpec("dgp1", n_units=0)
        with pytest.raises(ConfigError):
            DgpSpec("dgp1", n_periods=1)
        with pytest.raises(ConfigError):
            DgpSpec("dgp2", n_covariates=3)
        with pytest.raises(ConfigError):
            simulate_dgp1(DgpSpec("dgp2"))
        with pytest.raises(ConfigError):
            simulate_dgp2(DgpSpec("dgp1"))


class TestTruths:
    def test_point_values(self):
        assert true_value("dgp1", EstimandSpec(kind="point", t=10, s=0)) == 3.0
        assert true_value("dgp1", EstimandSpec(kind="point", t=10, s=1)) == 1.5
        assert true_value("dgp2", EstimandSpec(kind="point", t=10, s=0)) == 3.0
        assert true_value("dgp2", EstimandSpec(kind="point", t=10, s=1)) == 1.0

    def test_lag_aggregate_value(self):
        est = EstimandSpec(kind="lag_aggregate", t=10, weights=(0.5, 0.5))
        assert true_value("dgp1", est) == pytest.approx(2.25)

    def test_period_aggregate_is_lag_constant(self):
        est = EstimandSpec(kind="period_aggregate", s=0, t_values=(9, 10),
                           weights=(0.5, 0.5))
        assert true_value("dgp1", est) == pytest.approx(3.0)

    def test_estimand_validation_and_labels(self):
        with pytest.raises(ConfigError):
            EstimandSpec(kind="point", t=10)
        with pytest.raises(ConfigError):
            EstimandSpec(kind="lag_aggregate", t=10)
        with pytest.raises(ConfigError):
            EstimandSpec(kind="period_aggregate", s=0, t_values=(9, 10),
                         weights=(1.0,))
        with pytest.raises(ConfigError):
            EstimandSpec(kind="ratio")
        assert EstimandSpec(kind="point", t=9, s=1).label() == "theta_9(1)"
        assert EstimandSpec(kind="lag_aggregate", t=9,
                            weights=(0.5, 0.5)).label() == "theta_9"


class TestSeedLadder:
    def test_deterministic_and_distinct(self):
        a = replication_seeds(7, 3)
        assert a == replication_seeds(7, 3)
        assert len({replication_seeds(7, r) for r in range(20)}) == 20
        assert replication_seeds(7, 3) != replication_seeds(8, 3)

    def test_standalone_rerun_matches_batch(self):
        dgp = DgpSpec("dgp1", 60, 4, 2)
        est = EstimandSpec(kind="point", t=3, s=0)
        batch = run_monte_carlo(dgp, "GMM", est, 3, master_seed=5)
        solo = run_single_replication(dgp, "GMM", est, master_seed=5, r=2,
                                      k_folds=5)
        row = int(np.flatnonzero(batch.replication_ids == 2)[0])
        assert solo["point"] == batch.estimates[row]
        assert solo["std_error"] == batch.std_errors[row]


class TestSummarizeMetrics:
    def test_hand_values(self):
        m = summarize_metrics(
            estimates=np.array([1.0, 2.0, 3.0]),
            std_errors=np.array([0.5, 0.5, 0.5]),
            covered=np.array([True, False, True]),
            truth=2.0, n_requested=4,
        )
        assert m["n_effective"] == 3 and m["n_excluded"] == 1
        assert m["bias"] == pytest.approx(0.0)
        assert m["std_dev"] == pytest.approx(1.0)
        assert m["mse"] == pytest.approx(2.0 / 3.0)
        assert m["coverage"] == pytest.approx(2.0 / 3.0)
        assert m["mean_est_sd"] == pytest.approx(0.5)
        assert m["mc_se"] == pytest.approx(1.0 / np.sqrt(3))
        # identity between the (R-1) spread convention and MSE
        assert m["mse"] == pytest.approx(
            m["bias"] ** 2 + m["std_dev"] ** 2 * 2.0 / 3.0)

    def test_single_replication_has_no_spread(self):
        m = summarize_metrics(np.array([2.5]), np.array([0.3]),
                              np.array([True]), 3.0, 1)
        assert np.isnan(m["std_dev"]) and np.isnan(m["mc_se"])
        assert m["bias"] == pytest.approx(-0.5)

    def test_empty_summary_is_nan(self):
        m = summarize_metrics(np.array([]), np.array([]), np.array([]), 3.0, 5)
        assert m["n_effective"] == 0 and m["n_excluded"] == 5
        assert np.isnan(m["bias"]) and np.isnan(m["coverage"])


class TestMonteCarloHarness:
    def setup_method(self):
        self.dgp = DgpSpec("dgp1", 60, 4, 2)
        self.est = EstimandSpec(kind="point", t=3, s=0)

    def test_smoke_run_is_reproducible(self):
        a = run_monte_carlo(self.dgp, "GMM", self.est, 2, master_seed=0)
        b = run_monte_carlo(self.dgp, "GMM", self.est, 2, master_seed=0)
        assert isinstance(a, McResult)
        np.testing.assert_array_equal(a.estimates, b.estimates)
        np.testing.assert_array_equal(a.replication_ids, [0, 1])
        assert a.truth == 3.0
        assert a.covered.dtype == bool

    def test_failed_replications_are_excluded_and_reported(self):
        def flaky(dgp, preset, estimand, master_seed, r, **kwargs):
            if r % 2 == 1:
                raise NumericError("synthetic failure")
            return {"point": 3.0 + 0.1 * r, "std_error": 1.0,
                    "ci_lower": 0.0, "ci_upper": 10.0}

        res = run_monte_carlo(self.dgp, "GMM", self.est, 6, master_seed=0,
                              _runner=flaky)
        np.testing.assert_array_equal(res.replication_ids, [0, 2, 4])
        assert len(res.failures) == 3
        assert all("NumericError: synthetic failure" in msg
                   for _, msg in res.failures)
        assert res.metrics["n_excluded"] == 3
        assert res.metrics["coverage"] == 1.0

    def test_all_failed_gives_nan_metrics(self):
        def broken(*args, **kwargs):
            raise NumericError("nope")

        res = run_monte_carlo(self.dgp, "GMM", self.est, 3, master_seed=0,
                              _runner=broken)
        assert len(res.failures) == 3
        assert np.isnan(res.metrics["bias"])

    def test_replication_count_validated(self):
        with pytest.raises(ConfigError):
            run_monte_carlo(self.dgp, "GMM", self.est, 0, master_seed=0)

    def test_debiased_preset_smoke(self):
        res = run_monte_carlo(self.dgp, "DGMM", self.est, 1, master_seed=3)
        assert len(res.estimates) == 1
        assert np.isfinite(res.estimates[0])
        assert res.std_errors[0] > 0

    def test_lag_aggregate_replication(self):
        dgp = DgpSpec("dgp1", 60, 5, 2)
        est = EstimandSpec(kind="lag_aggregate", t=4, weights=(0.5, 0.5))
        out = run_single_replication(dgp, "GMM", est, master_seed=1, r=0)
        assert set(out) == {"point", "std_error", "ci_lower", "ci_upper"}
        assert out["ci_lower"] < out["point"] < out["ci_upper"]
