"""Robust borrowing of external controls in randomized-trial analyses.

Estimates average treatment effects in a trial while using external
control data, via a randomization-aware estimator class, a
variance-optimized member fit on reweighted pooled controls, joint
stacked M-estimation with sandwich inference, an optimally combined
estimator, exchangeability-based pooling baselines, and a deterministic
Monte Carlo harness.
"""

__version__ = "0.1.0"

from .data import (
    CsvSchema,
    Observation,
    TrialDataset,
    ValidationIssue,
    ValidationReport,
    parse_dataset,
    serialize_dataset,
    subset,
    validate,
)
from .estimators import (
    ESTIMATOR_METHODS,
    EstimateReport,
    LambdaStar,
    TestResult,
    aipw_psi,
    combined_tau,
    exchangeability_test,
    fit_hstar,
    fit_participation_model,
    ipw_psi,
    ipw_tau,
    lambda_star,
    or_psi,
    or_tau,
    optimized_tau,
    pooling_tau,
    run_estimator,
    test_then_pool_tau,
    trial_only_tau,
    unadjusted_tau,
)
from .mest import (
    Block,
    EstimatingStack,
    SandwichResult,
    SolveOptions,
    StackData,
    StackSolution,
    numerical_jacobian,
    sandwich_covariance,
    solve_stack,
)
from .models import (
    DesignMatrix,
    LinearModel,
    LogisticModel,
    fit_linear_wls,
    fit_logistic,
    predict_linear,
    predict_prob,
)
from .sim import (
    MonteCarloMetrics,
    ScenarioConfig,
    EstimatorSpec,
    export_lambda_distribution,
    generate_scenario,
    parse_estimator_spec,
    run_monte_carlo,
    tau_true,
)
