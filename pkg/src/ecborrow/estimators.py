"""Treatment-effect estimators for a trial augmented with external controls.

Implements the randomization-aware class (plug-in function h with known
randomization probability), its variance-optimized member fitted on
reweighted pooled controls, the classical trial-only estimators, the
exchangeability-based pooling and test-then-pool estimators, and the
variance-optimal combination of the trial-only and optimized estimators.
All standard errors come from the joint sandwich covariance of one
stacked estimating-equation system per estimator; no estimator exposes a
plug-in shortcut that treats nuisance fits as known.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit as sigmoid
from scipy.stats import f as f_dist
from scipy.stats import norm

from .data import TrialDataset
from .errors import (
    InsufficientData,
    MissingArm,
    MissingArmWarning,
    NoVariation,
)
from .mest import (
    Block,
    EstimatingStack,
    SandwichResult,
    SolveOptions,
    StackData,
    sandwich_covariance,
    solve_stack,
)
from .models import (
    PROB_CLIP,
    DesignMatrix,
    LinearModel,
    LogisticModel,
    fit_linear_wls,
    fit_logistic,
    predict_linear,
    predict_prob,
)

DEGENERATE_FACTOR = 1e-12


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with joint-sandwich inference and companion pieces."""

    method: str
    tau: float
    se: float
    ci: tuple[float, float]
    level: float
    psi1: float
    psi0: float
    lambda_: float | None = None
    sigma_g2: float | None = None
    sigma_h2: float | None = None
    sigma_gh: float | None = None
    test_pvalue: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "tau": self.tau,
            "se": self.se,
            "ci": list(self.ci),
            "level": self.level,
            "psi1": self.psi1,
            "psi0": self.psi0,
            "diagnostics": dict(self.diagnostics),
        }
        if self.lambda_ is not None:
            out["lambda"] = self.lambda_
            out["sigma_g2"] = self.sigma_g2
            out["sigma_h2"] = self.sigma_h2
            out["sigma_gh"] = self.sigma_gh
        if self.test_pvalue is not None:
            out["test_pvalue"] = self.test_pvalue
        return out


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: tuple[float, float]
    pvalue: float
    alpha: float
    rejected: bool


class LambdaStar(NamedTuple):
    value: float
    variance: float
    degenerate: bool


def lambda_star(sigma_g2: float, sigma_h2: float, sigma_gh: float) -> LambdaStar:
    """Variance-optimal mixing weight for the combined estimator.

    The weight applies to the optimized component; weight zero returns
    the trial-only estimator. A vanishing denominator (the two components
    share one limit) falls back to the trial-only solution with a
    degenerate flag instead of failing.
    """
    if sigma_g2 < 0 or sigma_h2 < 0:
        raise ValueError("variances must be nonnegative")
    denominator = sigma_g2 + sigma_h2 - 2.0 * sigma_gh
    if denominator < DEGENERATE_FACTOR * max(sigma_g2, sigma_h2, 1.0):
        return LambdaStar(0.0, sigma_g2, True)
    value = (sigma_g2 - sigma_gh) / denominator
    variance = max((sigma_g2 * sigma_h2 - sigma_gh**2) / denominator, 0.0)
    return LambdaStar(value, variance, False)


# ---------------------------------------------------------------------------
# plain-statistic operations


def _trial_arm_counts(ds: TrialDataset) -> tuple[int, int]:
    treated = int(np.sum((ds.s == 1) & (ds.a == 1)))
    control = int(np.sum((ds.s == 1) & (ds.a == 0)))
    return treated, control


def _require_trial_arms(ds: TrialDataset) -> None:
    treated, control = _trial_arm_counts(ds)
    if treated == 0:
        raise MissingArm("no trial row with A=1")
    if control == 0:
        raise MissingArm("no trial row with A=0")


def aipw_psi(ds: TrialDataset, a: int, h: LinearModel) -> float:
    """Randomization-aware arm-mean estimate for plug-in function h.

    Stays well-defined without rows in arm `a` (it reduces to the mean of
    h over trial rows); that case is flagged with MissingArmWarning.
    """
    if a not in (0, 1):
        raise ValueError("treatment level must be 0 or 1")
    trial = ds.s == 1
    if not np.any(trial & (ds.a == a)):
        warnings.warn(f"no trial row with A={a}; estimate reduces to the h-mean", MissingArmWarning)
    e_a = ds.p1 if a == 1 else 1.0 - ds.p1
    h_values = np.atleast_1d(predict_linear(h, ds.x[trial]))
    ind = (ds.a[trial] == a).astype(float)
    contrib = ind / e_a * (ds.y[trial] - h_values) + h_values
    return float(contrib.mean())


def ipw_psi(ds: TrialDataset, a: int) -> float:
    """Inverse probability weighting arm mean; aipw_psi with h identically zero."""
    return aipw_psi(ds, a, LinearModel(np.zeros(ds.d + 1)))


def or_psi(ds: TrialDataset, a: int, g: LinearModel | None = None) -> float:
    """Outcome-regression arm mean, standardized over all trial rows.

    With g omitted, fits unweighted least squares on trial rows of arm `a`.
    """
    if g is None:
        mask = (ds.s == 1) & (ds.a == a)
        if not np.any(mask):
            raise MissingArm(f"no trial row with A={a}")
        design = DesignMatrix.from_covariates(ds.x[mask])
        g = fit_linear_wls(design, ds.y[mask], np.ones(int(mask.sum())))
    trial = ds.s == 1
    return float(np.mean(np.atleast_1d(predict_linear(g, ds.x[trial]))))


def fit_participation_model(ds: TrialDataset) -> LogisticModel:
    """Logistic fit of S on covariates among rows with A=0.

    The observed-data fit is the right reweighting input even though the
    sampling design leaves the underlying participation probability
    unidentified in non-nested designs.
    """
    controls = ds.a == 0
    labels = ds.s.astype(float)
    if not (np.any(controls & (ds.s == 1)) and np.any(controls & (ds.s == 0))):
        raise NoVariation("controls must include both trial and external rows")
    design = DesignMatrix.from_covariates(ds.x)
    return fit_logistic(design, labels, (1.0 - ds.a).astype(float))


def fit_hstar(ds: TrialDataset, eta0: LogisticModel) -> LinearModel:
    """Weighted least squares for the variance-minimizing plug-in function.

    Fits on all control rows (both sources) with weight
    eta0(X) * p1 / (1 - p1)^2; the constant factor does not move the
    minimizer but is kept to match the estimating function exactly.
    """
    weights = np.where(
        ds.a == 0,
        np.atleast_1d(predict_prob(eta0, ds.x)) * ds.p1 / (1.0 - ds.p1) ** 2,
        0.0,
    )
    design = DesignMatrix.from_covariates(ds.x)
    return fit_linear_wls(design, ds.y, weights)


# ---------------------------------------------------------------------------
# estimating-function blocks

E1Fn = Callable[[StackData, dict], np.ndarray]


def _known_propensity(data: StackData, theta: dict) -> np.ndarray:
    return np.full(data.n, data.p1)


def _estimated_propensity(data: StackData, theta: dict) -> np.ndarray:
    return np.clip(sigmoid(data.xt @ theta["e1"]), PROB_CLIP, 1.0 - PROB_CLIP)


def _q_block() -> Block:
    def values(data: StackData, theta: dict) -> np.ndarray:
        return (data.s - theta["q"][0])[:, None]

    def solve(data: StackData, theta: dict, options: SolveOptions) -> np.ndarray:
        return np.array([data.s.mean()])

    return Block("q", 1, values, solve)


def _logistic_block(name: str, dim: int, labels: Callable, weight: Callable) -> Block:
    def values(data: StackData, theta: dict) -> np.ndarray:
        p = sigmoid(data.xt @ theta[name])
        return (weight(data) * (labels(data) - p))[:, None] * data.xt

    def solve(data: StackData, theta: dict, options: SolveOptions) -> np.ndarray:
        model = fit_logistic(
            DesignMatrix(data.xt), labels(data), weight(data), max_iter=options.max_iter
        )
        return model.coefficients

    return Block(name, dim, values, solve)


def _participation_block(dim: int) -> Block:
    return _logistic_block("eta0", dim, lambda d: d.s, lambda d: 1.0 - d.a)


def _propensity_block(dim: int) -> Block:
    return _logistic_block("e1", dim, lambda d: d.a, lambda d: d.s)


def _full_participation_block(dim: int) -> Block:
    return _logistic_block("eta", dim, lambda d: d.s, lambda d: np.ones(d.n))


def _wls_block(name: str, dim: int, weight: Callable, depends: tuple[str, ...]) -> Block:
    def values(data: StackData, theta: dict) -> np.ndarray:
        resid = data.y - data.xt @ theta[name]
        return (weight(data, theta) * resid)[:, None] * data.xt

    def solve(data: StackData, theta: dict, options: SolveOptions) -> np.ndarray:
        model = fit_linear_wls(DesignMatrix(data.xt), data.y, weight(data, theta))
        return model.coefficients

    return Block(name, dim, values, solve, depends)


def _g1_block(dim: int) -> Block:
    return _wls_block("g1", dim, lambda d, t: d.s * d.a, ())


def _g0_block(dim: int) -> Block:
    return _wls_block("g0", dim, lambda d, t: d.s * (1.0 - d.a), ())


def _g0_pool_block(dim: int, source: str) -> Block:
    if source == "pooled":
        weight = lambda d, t: 1.0 - d.a
    elif source == "trial":
        weight = lambda d, t: d.s * (1.0 - d.a)
    else:
        raise ValueError("g0_source must be 'pooled' or 'trial'")
    return _wls_block("g0_pool", dim, weight, ())


def _hstar_block(dim: int, weighted: bool, e1_fn: E1Fn, e1_estimated: bool) -> Block:
    if weighted:
        depends = ("eta0", "e1") if e1_estimated else ("eta0",)

        def weight(data: StackData, theta: dict) -> np.ndarray:
            eta0 = np.clip(sigmoid(data.xt @ theta["eta0"]), PROB_CLIP, 1.0 - PROB_CLIP)
            e1 = e1_fn(data, theta)
            return (1.0 - data.a) * eta0 * e1 / (1.0 - e1) ** 2

    else:
        # ablation: drop the participation factor from the objective
        depends = ("e1",) if e1_estimated else ()

        def weight(data: StackData, theta: dict) -> np.ndarray:
            e1 = e1_fn(data, theta)
            return (1.0 - data.a) * e1 / (1.0 - e1) ** 2

    return _wls_block("hstar", dim, weight, depends)


def _psi_block(name: str, a_level: int, model_block: str | None, e1_fn: E1Fn, e1_estimated: bool) -> Block:
    depends = ["q"]
    if model_block is not None:
        depends.append(model_block)
    if e1_estimated:
        depends.append("e1")

    def contrib(data: StackData, theta: dict) -> np.ndarray:
        e1 = e1_fn(data, theta)
        e_a = e1 if a_level == 1 else 1.0 - e1
        ind = data.a if a_level == 1 else 1.0 - data.a
        h = data.xt @ theta[model_block] if model_block is not None else np.zeros(data.n)
        return ind / e_a * (data.y - h) + h

    def values(data: StackData, theta: dict) -> np.ndarray:
        return ((data.s / theta["q"][0]) * (contrib(data, theta) - theta[name][0]))[:, None]

    def solve(data: StackData, theta: dict, options: SolveOptions) -> np.ndarray:
        c = contrib(data, theta)
        return np.array([float(np.sum(data.s * c) / np.sum(data.s))])

    return Block(name, 1, values, solve, tuple(depends))


def _or_psi_block(name: str, model_block: str) -> Block:
    def values(data: StackData, theta: dict) -> np.ndarray:
        g = data.xt @ theta[model_block]
        return ((data.s / theta["q"][0]) * (g - theta[name][0]))[:, None]

    def solve(data: StackData, theta: dict, options: SolveOptions) -> np.ndarray:
        g = data.xt @ theta[model_block]
        return np.array([float(np.sum(data.s * g) / np.sum(data.s))])

    return Block(name, 1, values, solve, ("q", model_block))


def _arm_mean_block(name: str, a_level: int) -> Block:
    def values(data: StackData, theta: dict) -> np.ndarray:
        ind = data.a if a_level == 1 else 1.0 - data.a
        return (data.s * ind * (data.y - theta[name][0]))[:, None]

    def solve(data: StackData, theta: dict, options: SolveOptions) -> np.ndarray:
        ind = data.a if a_level == 1 else 1.0 - data.a
        mask = data.s * ind
        return np.array([float(np.sum(mask * data.y) / np.sum(mask))])

    return Block(name, 1, values, solve)


def _diff_block(name: str, plus: str, minus: str) -> Block:
    def values(data: StackData, theta: dict) -> np.ndarray:
        value = theta[plus][0] - theta[minus][0] - theta[name][0]
        return np.full((data.n, 1), value)

    def solve(data: StackData, theta: dict, options: SolveOptions) -> np.ndarray:
        return np.array([theta[plus][0] - theta[minus][0]])

    return Block(name, 1, values, solve, (plus, minus))


def _zeta0_block(r: float) -> Block:
    def borrow_weight(data: StackData, theta: dict) -> np.ndarray:
        eta = np.clip(sigmoid(data.xt @ theta["eta"]), PROB_CLIP, 1.0 - PROB_CLIP)
        e0 = 1.0 - data.p1
        numerator = (data.s * (1.0 - data.a) + (1.0 - data.s) * r) * eta
        return numerator / (eta * e0 + (1.0 - eta) * r)

    def pieces(data: StackData, theta: dict) -> np.ndarray:
        g0 = data.xt @ theta["g0_pool"]
        return borrow_weight(data, theta) * (data.y - g0) + data.s * g0

    def values(data: StackData, theta: dict) -> np.ndarray:
        return ((pieces(data, theta) - data.s * theta["zeta0"][0]) / theta["q"][0])[:, None]

    def solve(data: StackData, theta: dict, options: SolveOptions) -> np.ndarray:
        return np.array([float(np.sum(pieces(data, theta)) / np.sum(data.s))])

    return Block("zeta0", 1, values, solve, ("q", "eta", "g0_pool"))


# ---------------------------------------------------------------------------
# stacks and reports


def _z_quantile(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError("confidence level must lie in (0, 1)")
    return float(norm.ppf(0.5 + level / 2.0))


def _report_from_sandwich(
    method: str,
    sw: SandwichResult,
    tau_block: str,
    psi1_block: str,
    psi0_block: str,
    level: float,
    **extra,
) -> EstimateReport:
    tau = sw.scalar(tau_block)
    se = sw.se(tau_block)
    z = _z_quantile(level)
    diagnostics = extra.pop("diagnostics", {})
    diagnostics.setdefault("residual_norm", sw.residual_norm)
    return EstimateReport(
        method=method,
        tau=tau,
        se=se,
        ci=(tau - z * se, tau + z * se),
        level=level,
        psi1=sw.scalar(psi1_block),
        psi0=sw.scalar(psi0_block),
        diagnostics=diagnostics,
        **extra,
    )


def _solve_with_sandwich(stack: EstimatingStack, ds: TrialDataset) -> SandwichResult:
    data = StackData.from_dataset(ds)
    solution = solve_stack(stack, data)
    return sandwich_covariance(stack, data, solution)


def unadjusted_tau(ds: TrialDataset, level: float = 0.95) -> EstimateReport:
    """Difference of trial arm means with sandwich inference."""
    _require_trial_arms(ds)
    stack = EstimatingStack(
        [_arm_mean_block("mu1", 1), _arm_mean_block("mu0", 0), _diff_block("tau", "mu1", "mu0")]
    )
    sw = _solve_with_sandwich(stack, ds)
    return _report_from_sandwich("unadjusted", sw, "tau", "mu1", "mu0", level)


def ipw_tau(ds: TrialDataset, level: float = 0.95) -> EstimateReport:
    """Inverse probability weighting contrast using the known randomization probability."""
    _require_trial_arms(ds)
    p = ds.d + 1
    stack = EstimatingStack(
        [
            _q_block(),
            _psi_block("psi1", 1, None, _known_propensity, False),
            _psi_block("psi0", 0, None, _known_propensity, False),
            _diff_block("tau", "psi1", "psi0"),
        ]
    )
    sw = _solve_with_sandwich(stack, ds)
    return _report_from_sandwich("ipw", sw, "tau", "psi1", "psi0", level)


def or_tau(ds: TrialDataset, level: float = 0.95) -> EstimateReport:
    """Outcome-regression contrast with arm models fit on trial arms."""
    _require_trial_arms(ds)
    p = ds.d + 1
    stack = EstimatingStack(
        [
            _q_block(),
            _g1_block(p),
            _or_psi_block("psi1", "g1"),
            _g0_block(p),
            _or_psi_block("psi0", "g0"),
            _diff_block("tau", "psi1", "psi0"),
        ]
    )
    sw = _solve_with_sandwich(stack, ds)
    return _report_from_sandwich("or", sw, "tau", "psi1", "psi0", level)


def trial_only_tau(ds: TrialDataset, level: float = 0.95) -> EstimateReport:
    """Doubly robust trial-only contrast (arm models fit on trial arms)."""
    treated, control = _trial_arm_counts(ds)
    needed = ds.d + 2
    if treated < needed or control < needed:
        raise InsufficientData(
            f"each trial arm needs at least {needed} rows, got treated={treated}, control={control}"
        )
    p = ds.d + 1
    stack = EstimatingStack(
        [
            _q_block(),
            _g1_block(p),
            _psi_block("psi1", 1, "g1", _known_propensity, False),
            _g0_block(p),
            _psi_block("psi0_g", 0, "g0", _known_propensity, False),
            _diff_block("tau_g", "psi1", "psi0_g"),
        ]
    )
    sw = _solve_with_sandwich(stack, ds)
    return _report_from_sandwich("aipw_trial", sw, "tau_g", "psi1", "psi0_g", level)


def _optimized_blocks(
    p: int, unweighted_objective: bool, estimate_propensity: bool
) -> list[Block]:
    e1_fn = _estimated_propensity if estimate_propensity else _known_propensity
    blocks: list[Block] = [_q_block()]
    if estimate_propensity:
        blocks.append(_propensity_block(p))
    if not unweighted_objective:
        blocks.append(_participation_block(p))
    blocks.extend(
        [
            _hstar_block(p, not unweighted_objective, e1_fn, estimate_propensity),
            _psi_block("psi0", 0, "hstar", e1_fn, estimate_propensity),
            _g1_block(p),
            _psi_block("psi1", 1, "g1", e1_fn, estimate_propensity),
            _diff_block("tau_h", "psi1", "psi0"),
        ]
    )
    return blocks


def optimized_tau(
    ds: TrialDataset,
    unweighted_objective: bool = False,
    estimate_propensity: bool = False,
    level: float = 0.95,
) -> EstimateReport:
    """Randomization-aware contrast with the variance-optimized plug-in function.

    The plug-in is fit by weighted least squares on pooled controls with
    participation-model weights; ablation flags drop the participation
    factor from the objective or replace the known randomization
    probability with a logistic fit on trial rows.
    """
    _require_trial_arms(ds)
    stack = EstimatingStack(_optimized_blocks(ds.d + 1, unweighted_objective, estimate_propensity))
    sw = _solve_with_sandwich(stack, ds)
    return _report_from_sandwich(
        "optimized",
        sw,
        "tau_h",
        "psi1",
        "psi0",
        level,
        diagnostics={
            "weighted_objective": not unweighted_objective,
            "propensity": "estimated" if estimate_propensity else "known",
        },
    )


def combined_tau(
    ds: TrialDataset,
    unweighted_objective: bool = False,
    estimate_propensity: bool = False,
    level: float = 0.95,
) -> EstimateReport:
    """Variance-optimal blend of the trial-only and optimized contrasts.

    Both contrasts and every nuisance fit are solved in one joint stack;
    the mixing weight and its variance come from the joint sandwich
    covariance of the two contrast blocks.
    """
    _require_trial_arms(ds)
    p = ds.d + 1
    e1_fn = _estimated_propensity if estimate_propensity else _known_propensity
    blocks = _optimized_blocks(p, unweighted_objective, estimate_propensity)
    blocks.extend(
        [
            _g0_block(p),
            _psi_block("psi0_g", 0, "g0", e1_fn, estimate_propensity),
            _diff_block("tau_g", "psi1", "psi0_g"),
        ]
    )
    stack = EstimatingStack(blocks)
    sw = _solve_with_sandwich(stack, ds)

    tau_h = sw.scalar("tau_h")
    tau_g = sw.scalar("tau_g")
    sigma_h2 = sw.variance("tau_h")
    sigma_g2 = sw.variance("tau_g")
    sigma_gh = sw.covariance_entry("tau_g", "tau_h")
    lam = lambda_star(sigma_g2, sigma_h2, sigma_gh)

    tau = lam.value * tau_h + (1.0 - lam.value) * tau_g
    se = float(np.sqrt(lam.variance))
    z = _z_quantile(level)
    psi0 = lam.value * sw.scalar("psi0") + (1.0 - lam.value) * sw.scalar("psi0_g")
    return EstimateReport(
        method="combined",
        tau=tau,
        se=se,
        ci=(tau - z * se, tau + z * se),
        level=level,
        psi1=sw.scalar("psi1"),
        psi0=psi0,
        lambda_=lam.value,
        sigma_g2=sigma_g2,
        sigma_h2=sigma_h2,
        sigma_gh=sigma_gh,
        diagnostics={
            "tau_h": tau_h,
            "tau_g": tau_g,
            "se_h": float(np.sqrt(sigma_h2)),
            "se_g": float(np.sqrt(sigma_g2)),
            "lambda_degenerate": lam.degenerate,
            "residual_norm": sw.residual_norm,
            "weighted_objective": not unweighted_objective,
            "propensity": "estimated" if estimate_propensity else "known",
        },
    )


def pooling_tau(
    ds: TrialDataset,
    r: float = 1.0,
    g0_source: str = "pooled",
    level: float = 0.95,
) -> EstimateReport:
    """Exchangeability-based pooling contrast with variance-ratio r.

    The control mean borrows external rows through the participation
    model for Pr[S=1 | X] fit on all rows; r controls how much is
    borrowed (r=0 reduces to the trial-only control mean given the same
    outcome fit, taken on pooled controls by default or on trial controls
    with ``g0_source='trial'``).
    """
    _require_trial_arms(ds)
    if r < 0:
        raise ValueError("variance ratio r must be nonnegative")
    p = ds.d + 1
    stack = EstimatingStack(
        [
            _q_block(),
            _full_participation_block(p),
            _g1_block(p),
            _psi_block("psi1", 1, "g1", _known_propensity, False),
            _g0_pool_block(p, g0_source),
            _zeta0_block(r),
            _diff_block("tau_p", "psi1", "zeta0"),
        ]
    )
    sw = _solve_with_sandwich(stack, ds)
    return _report_from_sandwich(
        "pooling",
        sw,
        "tau_p",
        "psi1",
        "zeta0",
        level,
        diagnostics={"r": r, "g0_source": g0_source},
    )


def exchangeability_test(ds: TrialDataset, alpha: float = 0.05) -> TestResult:
    """F-test of equal control-arm regression surfaces across sources.

    Compares the linear model with source main effect and all
    source-by-covariate interactions against the covariates-only model,
    on pooled controls.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    controls = ds.a == 0
    if not (np.any(controls & (ds.s == 1)) and np.any(controls & (ds.s == 0))):
        raise NoVariation("pooled controls must include both sources")
    x = ds.x[controls]
    y = ds.y[controls]
    s = ds.s[controls].astype(float)
    n_c = x.shape[0]
    p = ds.d + 1
    df_num = p
    df_den = n_c - 2 * p
    if df_den <= 0:
        raise InsufficientData(f"need more than {2 * p} pooled controls, got {n_c}")

    reduced = DesignMatrix.from_covariates(x)
    full_rows = np.hstack([reduced.rows, s[:, None] * reduced.rows])
    ones = np.ones(n_c)
    fit_reduced = fit_linear_wls(reduced, y, ones)
    fit_full = fit_linear_wls(DesignMatrix(full_rows), y, ones)
    ssr_reduced = float(np.sum((y - reduced.rows @ fit_reduced.coefficients) ** 2))
    ssr_full = float(np.sum((y - full_rows @ fit_full.coefficients) ** 2))

    if ssr_full <= 0.0:
        statistic = np.inf if ssr_reduced > ssr_full else 0.0
    else:
        statistic = max(ssr_reduced - ssr_full, 0.0) / df_num / (ssr_full / df_den)
    pvalue = float(f_dist.sf(statistic, df_num, df_den))
    return TestResult(
        statistic=float(statistic),
        df=(float(df_num), float(df_den)),
        pvalue=pvalue,
        alpha=alpha,
        rejected=pvalue < alpha,
    )


def test_then_pool_tau(
    ds: TrialDataset,
    alpha: float = 0.05,
    r: float = 1.0,
    level: float = 0.95,
) -> EstimateReport:
    """Pre-test estimator: pool only when the compatibility test does not reject.

    The reported standard error is the selected branch's; no correction
    for the pre-test is applied.
    """
    test = exchangeability_test(ds, alpha)
    if test.rejected:
        branch = trial_only_tau(ds, level)
    else:
        branch = pooling_tau(ds, r=r, level=level)
    diagnostics = dict(branch.diagnostics)
    diagnostics["branch"] = branch.method
    diagnostics["test_statistic"] = test.statistic
    diagnostics["test_df"] = list(test.df)
    diagnostics["alpha"] = alpha
    return EstimateReport(
        method="test_then_pool",
        tau=branch.tau,
        se=branch.se,
        ci=branch.ci,
        level=branch.level,
        psi1=branch.psi1,
        psi0=branch.psi0,
        test_pvalue=test.pvalue,
        diagnostics=diagnostics,
    )


ESTIMATOR_METHODS: dict[str, Callable[..., EstimateReport]] = {
    "unadjusted": unadjusted_tau,
    "ipw": ipw_tau,
    "or": or_tau,
    "aipw_trial": trial_only_tau,
    "optimized": optimized_tau,
    "pooling": pooling_tau,
    "test_then_pool": test_then_pool_tau,
    "combined": combined_tau,
}

METHOD_ALIASES = {"aipw": "aipw_trial"}


def resolve_method(name: str) -> str:
    method = METHOD_ALIASES.get(name, name)
    if method not in ESTIMATOR_METHODS:
        known = sorted(ESTIMATOR_METHODS) + sorted(METHOD_ALIASES)
        raise KeyError(f"unknown estimator {name!r}; expected one of {known}")
    return method


def run_estimator(method: str, ds: TrialDataset, **options) -> EstimateReport:
    return ESTIMATOR_METHODS[resolve_method(method)](ds, **options)
