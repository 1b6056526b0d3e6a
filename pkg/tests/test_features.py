"""Feature layer: schemas, raw assembly, dictionaries, and analytic derivatives."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panel_dml import (
    ConfigError,
    DomainError,
    FullPolyGen,
    InteractionGen,
    InterceptGen,
    LagError,
    PanelDataset,
    PowerGen,
    ShapeError,
    VariableSpec,
    VarSelector,
    assemble_V,
    assemble_Z,
    build_dictionary,
    derivative_by_period,
    eval_dictionary,
    eval_dictionary_derivative,
    fit_standardization,
    raw_for_schema,
    v_schema,
    z_schema,
)
from panel_dml.presets import (
    benchmark_b_generators,
    benchmark_d_generators,
    benchmark_v_generators,
    benchmark_z_generators,
    raw_level_v_generators,
    raw_level_z_generators,
)


def make_panel(n=4, t=6, n_cov=2, n_inst=0, n_invariant=0, seed=0):
    rng = np.random.default_rng(seed)
    return PanelDataset(
        outcome=rng.normal(size=(n, t)),
        treatment=rng.normal(size=(n, t)),
        covariates=rng.normal(size=(n, t, n_cov)),
        instruments=rng.normal(size=(n, t, n_inst)),
        invariant_covariates=rng.normal(size=(n, n_invariant)),
    )


X = lambda lag, comp=0: VariableSpec("covariate", lag, comp)
D = lambda lag: VariableSpec("treatment", lag)


class TestVSchema:
    def test_static_order(self):
        panel = make_panel(n_cov=2)
        schema = v_schema(panel, q=1)
        assert schema == (
            X(1, 0), X(1, 1), X(0, 0), X(0, 1), D(1), D(0),
        )

    def test_dynamic_prepends_outcome_lags(self):
        panel = make_panel(n_cov=1)
        schema = v_schema(panel, q=0, model="dynamic", p=1)
        assert schema[:2] == (
            VariableSpec("outcome_lag", 2), VariableSpec("outcome_lag", 1),
        )
        assert schema[2:] == (X(0, 0), D(0))

    def test_invariants_trail(self):
        panel = make_panel(n_cov=1, n_invariant=2)
        schema = v_schema(panel, q=0)
        assert schema[-2:] == (
            VariableSpec("invariant", 0, 0), VariableSpec("invariant", 0, 1),
        )

    def test_rejects_bad_arguments(self):
        panel = make_panel()
        with pytest.raises(ConfigError):
            v_schema(panel, q=-1)
        with pytest.raises(ConfigError):
            v_schema(panel, q=1, model="semiparametric")
        with pytest.raises(ConfigError):
            v_schema(panel, q=0, model="dynamic", p=-1)

    @given(q=st.integers(0, 3), p=st.integers(0, 2), n_cov=st.integers(0, 3),
           n_invariant=st.integers(0, 2))
    @settings(max_examples=25, deadline=None)
    def test_length_formula(self, q, p, n_cov, n_invariant):
        panel = make_panel(n_cov=n_cov, n_invariant=n_invariant)
        static = v_schema(panel, q)
        dynamic = v_schema(panel, q, model="dynamic", p=p)
        assert len(static) == (q + 1) * (n_cov + 1) + n_invariant
        assert len(dynamic) == len(static) + p + 1


class TestZSchema:
    def test_full_history_ascending_periods(self):
        panel = make_panel(n_cov=1, n_inst=1)
        schema = z_schema(panel, t=4, s=0)
        # histories run over physical periods 1..t-s-1, stored as lags from t
        assert schema == (
            X(3, 0), X(2, 0), X(1, 0),
            D(3), D(2), D(1),
            VariableSpec("instrument", 3, 0),
            VariableSpec("instrument", 2, 0),
            VariableSpec("instrument", 1, 0),
        )

    def test_lag_order_shortens_history(self):
        panel = make_panel(n_cov=0, t=6)
        assert z_schema(panel, t=6, s=2) == (D(5), D(4), D(3))

    def test_exogenous_covariate_filter(self):
        panel = make_panel(n_cov=3)
        schema = z_schema(panel, t=3, s=0, exogenous_covariates=(2,))
        covs = [spec for spec in schema if spec.role == "covariate"]
        assert covs == [X(2, 2), X(1, 2)]

    def test_dynamic_outcomes_stop_one_period_earlier(self):
        panel = make_panel(n_cov=0, t=8)
        schema = z_schema(panel, t=5, s=0, model="dynamic")
        lags = [spec for spec in schema if spec.role == "outcome_lag"]
        # outcomes allowed up to t-s-2 = 3, i.e. physical periods 1..3
        assert lags == [
            VariableSpec("outcome_lag", 4),
            VariableSpec("outcome_lag", 3),
            VariableSpec("outcome_lag", 2),
        ]

    def test_no_history_raises(self):
        panel = make_panel()
        with pytest.raises(LagError):
            z_schema(panel, t=2, s=1)
        with pytest.raises(LagError):
            z_schema(panel, t=3, s=1, model="dynamic")

    def test_bad_component_raises(self):
        panel = make_panel(n_cov=2)
        with pytest.raises(DomainError):
            z_schema(panel, t=4, s=0, exogenous_covariates=(5,))


class TestRawAssembly:
    def test_columns_match_panel_slices(self):
        panel = make_panel(n_cov=2, n_invariant=1)
        schema = (X(1, 1), D(0), VariableSpec("invariant", 0, 0))
        raw = raw_for_schema(panel, schema, base_t=3)
        np.testing.assert_array_equal(raw[:, 0], panel.covariates[:, 1, 1])
        np.testing.assert_array_equal(raw[:, 1], panel.treatment[:, 2])
        np.testing.assert_array_equal(raw[:, 2], panel.invariant_covariates[:, 0])

    def test_same_schema_shifts_with_base_period(self):
        panel = make_panel()
        schema = (D(1), D(0))
        np.testing.assert_array_equal(
            raw_for_schema(panel, schema, base_t=4)[:, 0],
            raw_for_schema(panel, schema, base_t=3)[:, 1],
        )

    def test_out_of_panel_raises(self):
        panel = make_panel(t=4)
        with pytest.raises(LagError):
            raw_for_schema(panel, (D(2),), base_t=2)
        with pytest.raises(LagError):
            raw_for_schema(panel, (D(0),), base_t=5)

    def test_assemble_helpers_agree(self):
        panel = make_panel(n_cov=1, n_inst=1)
        raw_v, sv = assemble_V(panel, t=5, q=1)
        raw_z, sz = assemble_Z(panel, t=5, s=0)
        np.testing.assert_array_equal(raw_v, raw_for_schema(panel, sv, 5))
        np.testing.assert_array_equal(raw_z, raw_for_schema(panel, sz, 5))

    def test_outcome_history_columns(self):
        panel = make_panel(t=5)
        raw = raw_for_schema(panel, (VariableSpec("outcome_lag", 2),), base_t=4)
        np.testing.assert_array_equal(raw[:, 0], panel.outcome[:, 1])


class TestBuildDictionary:
    def setup_method(self):
        self.schema = (X(1), X(0), D(1), D(0))

    def test_power_terms_in_generator_order(self):
        d = build_dictionary(
            (InterceptGen(), PowerGen(vars=(VarSelector("treatment", 0),), powers=(1, 2))),
            self.schema,
        )
        assert d.size == 3
        assert d.terms[0].is_intercept
        assert d.terms[1].factors == ((D(0), 1),)
        assert d.terms[2].factors == ((D(0), 2),)

    def test_duplicates_keep_first_position(self):
        gens = (
            PowerGen(vars=(VarSelector("treatment", 0),), powers=(1, 2)),
            PowerGen(vars=(VarSelector("treatment", 0),), powers=(2, 3)),
        )
        d = build_dictionary(gens, self.schema)
        assert [t.degree() for t in d.terms] == [1, 2, 3]

    def test_interaction_merges_repeated_variable(self):
        gens = (
            InteractionGen(left=(VarSelector("treatment", 0),),
                           right=(VarSelector("treatment", 0),),
                           left_powers=(1,), right_powers=(1,)),
            PowerGen(vars=(VarSelector("treatment", 0),), powers=(2,)),
        )
        d = build_dictionary(gens, self.schema)
        # D*D canonicalizes to D^2, so the PowerGen copy is a duplicate
        assert d.size == 1
        assert d.terms[0].factors == ((D(0), 2),)

    def test_zero_power_collapses_to_intercept(self):
        d = build_dictionary(
            (PowerGen(vars=(VarSelector("treatment", 0),), powers=(0,)),),
            self.schema,
        )
        assert d.size == 1 and d.terms[0].is_intercept

    def test_full_poly_counts(self):
        sel = (VarSelector("treatment", 0), VarSelector("treatment", 1))
        d = build_dictionary((FullPolyGen(vars=sel, max_degree=3),), self.schema)
        # monomials in 2 variables of total degree 1..3: 2 + 3 + 4
        assert d.size == 9
        assert max(t.degree() for t in d.terms) == 3

    def test_selector_without_match_raises(self):
        with pytest.raises(ConfigError):
            build_dictionary(
                (PowerGen(vars=(VarSelector("instrument", 0),), powers=(1,)),),
                self.schema,
            )

    def test_negative_power_raises(self):
        with pytest.raises(ConfigError):
            build_dictionary(
                (PowerGen(vars=(VarSelector("treatment", 0),), powers=(-1,)),),
                self.schema,
            )

    def test_empty_raises(self):
        with pytest.raises(ConfigError):
            build_dictionary((), self.schema)

    def test_component_none_selects_all(self):
        schema = (X(0, 0), X(0, 1), X(0, 2))
        d = build_dictionary(
            (PowerGen(vars=(VarSelector("covariate", 0),), powers=(1,)),), schema
        )
        assert d.size == 3

    def test_build_is_deterministic(self):
        gens = (InterceptGen(), FullPolyGen(vars=(VarSelector("treatment", 0),
                                                  VarSelector("covariate", 1)), max_degree=2))
        assert build_dictionary(gens, self.schema).terms == \
            build_dictionary(gens, self.schema).terms


class TestEvaluation:
    def setup_method(self):
        self.schema = (X(0), D(0))
        self.dict = build_dictionary(
            (InterceptGen(),
             PowerGen(vars=(VarSelector("treatment", 0),), powers=(1, 2)),
             InteractionGen(left=(VarSelector("treatment", 0),),
                            right=(VarSelector("covariate", 0),),
                            left_powers=(1,), right_powers=(1,))),
            self.schema,
        )
        rng = np.random.default_rng(3)
        self.raw = rng.normal(size=(7, 2))

    def test_monomial_values(self):
        x, d = self.raw[:, 0], self.raw[:, 1]
        feats = eval_dictionary(self.dict, self.raw)
        np.testing.assert_allclose(feats[:, 0], 1.0)
        np.testing.assert_allclose(feats[:, 1], d)
        np.testing.assert_allclose(feats[:, 2], d ** 2)
        np.testing.assert_allclose(feats[:, 3], d * x)

    def test_wrong_width_raises(self):
        with pytest.raises(ShapeError):
            eval_dictionary(self.dict, self.raw[:, :1])
        with pytest.raises(ShapeError):
            eval_dictionary_derivative(self.dict, self.raw[:, :1], D(0))

    def test_column_of_unknown_spec_raises(self):
        with pytest.raises(DomainError):
            self.dict.column_of(VariableSpec("treatment", 4))


class TestStandardization:
    def setup_method(self):
        self.schema = (X(0), D(0))
        self.gens = (
            InterceptGen(),
            PowerGen(vars=(VarSelector("treatment", 0),), powers=(1, 2)),
        )
        rng = np.random.default_rng(5)
        self.raw = rng.normal(loc=2.0, scale=3.0, size=(200, 2))

    def test_population_moments(self):
        d = fit_standardization(build_dictionary(self.gens, self.schema), self.raw)
        feats_raw = eval_dictionary(build_dictionary(self.gens, self.schema), self.raw)
        np.testing.assert_allclose(d.means[1:], feats_raw[:, 1:].mean(axis=0))
        np.testing.assert_allclose(d.scales[1:], feats_raw[:, 1:].std(axis=0))  # ddof=0

    def test_fitted_features_centered_and_scaled(self):
        d = fit_standardization(build_dictionary(self.gens, self.schema), self.raw)
        feats = eval_dictionary(d, self.raw)
        np.testing.assert_allclose(feats[:, 1:].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(feats[:, 1:].std(axis=0), 1.0, atol=1e-12)

    def test_intercept_exempt(self):
        d = fit_standardization(build_dictionary(self.gens, self.schema), self.raw)
        assert d.means[0] == 0.0 and d.scales[0] == 1.0 and not d.degenerate[0]
        np.testing.assert_allclose(eval_dictionary(d, self.raw)[:, 0], 1.0)

    def test_degenerate_term_passes_through(self):
        raw = self.raw.copy()
        raw[:, 1] = 1.5  # constant treatment makes every power degenerate
        d = fit_standardization(build_dictionary(self.gens, self.schema), raw)
        assert d.degenerate[1] and d.degenerate[2]
        assert d.scales[1] == 1.0
        feats = eval_dictionary(d, raw)
        np.testing.assert_allclose(feats[:, 1], 0.0, atol=1e-12)  # centered constant

    def test_refit_raises(self):
        d = fit_standardization(build_dictionary(self.gens, self.schema), self.raw)
        with pytest.raises(ConfigError):
            fit_standardization(d, self.raw)

    def test_transform_uses_fitting_sample_only(self):
        d = fit_standardization(build_dictionary(self.gens, self.schema), self.raw)
        other = np.random.default_rng(9).normal(size=(50, 2))
        raw_feats = eval_dictionary(build_dictionary(self.gens, self.schema), other)
        np.testing.assert_allclose(
            eval_dictionary(d, other), (raw_feats - d.means) / d.scales
        )


def finite_difference(dictionary, raw, wrt, h=1e-6):
    col = dictionary.schema.index(wrt)
    up, dn = raw.copy(), raw.copy()
    up[:, col] += h
    dn[:, col] -= h
    return (eval_dictionary(dictionary, up) - eval_dictionary(dictionary, dn)) / (2 * h)


class TestDerivatives:
    def setup_method(self):
        self.schema = (X(1), X(0), D(1), D(0))
        self.gens = (
            InterceptGen(),
            FullPolyGen(vars=(VarSelector("treatment", 0), VarSelector("treatment", 1),
                              VarSelector("covariate", 0)), max_degree=3),
        )
        rng = np.random.default_rng(11)
        self.raw = rng.uniform(0.5, 2.0, size=(40, 4))

    def test_matches_finite_differences(self):
        d = build_dictionary(self.gens, self.schema)
        for wrt in (D(0), D(1), X(0)):
            analytic = eval_dictionary_derivative(d, self.raw, wrt)
            fd = finite_difference(d, self.raw, wrt)
            np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-6)

    def test_matches_finite_differences_after_standardization(self):
        d = fit_standardization(build_dictionary(self.gens, self.schema), self.raw)
        analytic = eval_dictionary_derivative(d, self.raw, D(0))
        fd = finite_difference(d, self.raw, D(0))
        np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-6)

    def test_variable_absent_from_terms_gives_zeros(self):
        d = build_dictionary(self.gens, self.schema)
        deriv = eval_dictionary_derivative(d, self.raw, X(1))
        np.testing.assert_array_equal(deriv, np.zeros((40, d.size)))

    def test_intercept_column_is_zero(self):
        d = build_dictionary(self.gens, self.schema)
        np.testing.assert_array_equal(
            eval_dictionary_derivative(d, self.raw, D(0))[:, 0], 0.0
        )

    def test_product_rule_by_hand(self):
        d = build_dictionary(
            (InteractionGen(left=(VarSelector("treatment", 0),),
                            right=(VarSelector("covariate", 0),),
                            left_powers=(2,), right_powers=(1,)),),
            self.schema,
        )
        deriv = eval_dictionary_derivative(d, self.raw, D(0))
        np.testing.assert_allclose(deriv[:, 0], 2 * self.raw[:, 3] * self.raw[:, 1])


class TestDerivativeByPeriod:
    def setup_method(self):
        panel = make_panel(n_cov=1, t=8, seed=21)
        self.panel = panel
        self.raw, self.schema = assemble_V(panel, t=5, q=1)
        self.dict = build_dictionary(
            (FullPolyGen(vars=(VarSelector("treatment", 0), VarSelector("treatment", 1)),
                         max_degree=2),),
            self.schema,
        )

    def test_contained_period_matches_direct_derivative(self):
        by_period = derivative_by_period(self.dict, self.raw, base_t=5,
                                         role="treatment", period=4)
        direct = eval_dictionary_derivative(self.dict, self.raw, D(1))
        np.testing.assert_array_equal(by_period, direct)

    def test_uncontained_period_is_exactly_zero(self):
        out = derivative_by_period(self.dict, self.raw, base_t=5,
                                   role="treatment", period=2)
        np.testing.assert_array_equal(out, np.zeros((self.panel.n_units, self.dict.size)))

    def test_base_period_shift_moves_containment_window(self):
        raw6 = raw_for_schema(self.panel, self.schema, base_t=6)
        # period 4 is lag 1 at base 5 but lag 2 at base 6, outside q=1
        assert derivative_by_period(self.dict, self.raw, 5, "treatment", 4).any()
        assert not derivative_by_period(self.dict, raw6, 6, "treatment", 4).any()
        assert not derivative_by_period(self.dict, self.raw, 5, "treatment", 6).any()


class TestBenchmarkDictionarySizes:
    """Term counts for the preset generator stacks on the benchmark layout
    (5 covariates, first-order dynamics)."""

    def setup_method(self):
        self.panel = make_panel(n=3, t=10, n_cov=5)

    def test_structural_dictionary(self):
        schema = v_schema(self.panel, q=1)
        assert build_dictionary(benchmark_v_generators(), schema).size == 61

    def test_instrument_dictionary(self):
        schema = z_schema(self.panel, t=10, s=0)
        assert build_dictionary(benchmark_z_generators(0), schema).size == 76

    def test_balancing_dictionary(self):
        schema = z_schema(self.panel, t=10, s=0)
        assert build_dictionary(benchmark_b_generators(0), schema).size == 127

    def test_derivative_target_dictionary(self):
        schema = v_schema(self.panel, q=1)
        assert build_dictionary(benchmark_d_generators(), schema).size == 454

    def test_raw_level_dictionaries(self):
        sv = v_schema(self.panel, q=1)
        sz = z_schema(self.panel, t=10, s=0)
        assert build_dictionary(raw_level_v_generators(), sv).size == 2
        assert build_dictionary(raw_level_z_generators(0), sz).size == 12

    def test_sizes_stable_across_lag_order(self):
        schema = z_schema(self.panel, t=10, s=1)
        assert build_dictionary(benchmark_b_generators(1), schema).size == 127
