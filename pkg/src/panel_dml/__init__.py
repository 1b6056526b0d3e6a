"""Debiased machine learning for average-derivative effects in panels with
two-way fixed effects and endogenous regressors.

The pipeline: s-lag differencing removes unit effects, cross-fold demeaning
removes time effects, a penalized-GMM first stage fits the structural function
gamma, an automatically estimated Riesz representer supplies the debiasing
term, and cross-fitting over a K-fold unit partition ties it together with
valid plug-in-free standard errors.
"""

from .data import (
    ColumnSchema,
    FoldPartition,
    PanelDataset,
    cross_fold_demean,
    difference,
    estimation_demean,
    estimation_folds,
    estimation_units,
    fold_successor,
    load_panel,
    split_folds,
)
from .errors import (
    BalanceError,
    ConfigError,
    DataError,
    DomainError,
    DuplicateError,
    LagError,
    NumericError,
    PanelDMLError,
    ParseError,
    SelfDemeanError,
    ShapeError,
)
from .estimator import (
    EstimateReport,
    GammaEstimate,
    GammaSpec,
    RieszSpec,
    aggregate_over_lags,
    aggregate_over_periods,
    debiased_theta,
    fit_gamma,
    plugin_theta,
    variance_estimate,
)
from .features import (
    BasisTerm,
    Dictionary,
    FullPolyGen,
    InteractionGen,
    InterceptGen,
    PowerGen,
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
from .orthogonality import orthogonality_experiment, perturbed_estimates
from .presets import (
    PRESETS,
    build_specs,
    gamma_method,
    is_debiased,
    preset_specs,
)
from .riesz import (
    RieszEstimate,
    build_G_hat,
    build_M_hat,
    estimate_riesz,
)
from .simulation import (
    DgpSpec,
    EstimandSpec,
    McResult,
    replication_seeds,
    run_monte_carlo,
    run_single_replication,
    simulate,
    simulate_dgp1,
    simulate_dgp2,
    summarize_metrics,
    true_value,
)
from .solver import (
    CvResult,
    MomentSystem,
    PenalizedSolution,
    PenaltySpec,
    cross_validate_penalty,
    default_penalty_grid,
    fit_penalized,
    kkt_violation,
    lasso_system,
    rate_penalty,
    soft_threshold,
    solve_lasso,
    solve_path,
    solve_penalized_gmm,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
