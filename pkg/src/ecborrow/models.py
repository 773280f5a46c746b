"""Parametric working models: exact weighted least squares and Newton logistic fits.

Both model families are linear in covariates with a leading intercept.
The logistic score equation solved here is exactly the estimating
function used by the stacked M-estimation module, so fitted coefficients
zero the corresponding stack blocks by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .errors import DimensionMismatch, NoVariation, Separation, SingularDesign

PROB_CLIP = 1e-6
GRAM_CONDITION_LIMIT = 1e12
_SCORE_TOL = 1e-8
_NEWTON_STEP_LIMIT = 1e3


@dataclass(frozen=True)
class DesignMatrix:
    """n x (d+1) real matrix whose first column is the intercept."""

    rows: np.ndarray
    feature_map: str = "intercept+identity"

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2:
            raise DimensionMismatch("design must be a 2-d array")
        if rows.shape[1] < 1 or not np.all(rows[:, 0] == 1.0):
            raise DimensionMismatch("first design column must be all ones")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_covariates(cls, x: np.ndarray, feature_map: str = "intercept+identity") -> "DesignMatrix":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        ones = np.ones((x.shape[0], 1))
        return cls(np.hstack([ones, x]), feature_map)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def n_params(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class LinearModel:
    coefficients: np.ndarray

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float)
        if coef.ndim != 1 or not np.all(np.isfinite(coef)):
            raise DimensionMismatch("coefficients must be a finite 1-d vector")
        object.__setattr__(self, "coefficients", coef)


@dataclass(frozen=True)
class LogisticModel:
    coefficients: np.ndarray

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float)
        if coef.ndim != 1 or not np.all(np.isfinite(coef)):
            raise DimensionMismatch("coefficients must be a finite 1-d vector")
        object.__setattr__(self, "coefficients", coef)


def _check_lengths(design: DesignMatrix, y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if y.shape != (design.n,) or w.shape != (design.n,):
        raise DimensionMismatch("response and weights must have one entry per design row")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    return y, w


def fit_linear_wls(design: DesignMatrix, y: np.ndarray, w: np.ndarray) -> LinearModel:
    """Solve the weighted normal equations X'W(y - Xg) = 0 exactly.

    Raises SingularDesign when the weighted Gram matrix has condition
    number above 1e12 (includes underdetermined fits and zero weights).
    """
    y, w = _check_lengths(design, y, w)
    x = design.rows
    if design.n < design.n_params:
        raise SingularDesign(
            f"need at least {design.n_params} rows to fit {design.n_params} parameters, got {design.n}"
        )
    total_w = float(np.sum(w))
    if total_w <= 0:
        raise SingularDesign("total weight must be positive")
    xw = x * w[:, None]
    gram = xw.T @ x
    target = xw.T @ y
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > GRAM_CONDITION_LIMIT:
        raise SingularDesign(f"weighted Gram matrix condition number {cond:.3g} exceeds 1e12")
    coef = np.linalg.solve(gram, target)
    residual = np.max(np.abs(target - gram @ coef))
    if residual > _SCORE_TOL * (1.0 + np.max(np.abs(target))):
        raise SingularDesign("weighted normal equations could not be solved to tolerance")
    return LinearModel(coef)


def fit_logistic(
    design: DesignMatrix,
    labels: np.ndarray,
    w: np.ndarray | None = None,
    max_iter: int = 100,
) -> LogisticModel:
    """Damped-Newton logistic fit zeroing the weighted score equation.

    Deterministic given inputs. Raises NoVariation for constant labels
    and Separation when the fit diverges (quasi-complete separation).
    """
    if w is None:
        w = np.ones(design.n)
    labels, w = _check_lengths(design, labels, w)
    if not np.all(np.isin(labels[w > 0], (0.0, 1.0))):
        raise ValueError("labels must be binary")
    active = w > 0
    if not (np.any(labels[active] == 1.0) and np.any(labels[active] == 0.0)):
        raise NoVariation("both label classes must be present among positively weighted rows")

    x = design.rows
    n = design.n
    tol = _SCORE_TOL * n
    beta = np.zeros(design.n_params)

    def nll(b: np.ndarray) -> float:
        z = x @ b
        return float(np.sum(w * (np.logaddexp(0.0, z) - labels * z)))

    current = nll(beta)
    for _ in range(max_iter):
        z = x @ beta
        p = sigmoid(z)
        score = (w * (labels - p)) @ x
        if np.max(np.abs(score)) <= tol:
            return LogisticModel(beta)
        hess = (x * (w * p * (1.0 - p))[:, None]).T @ x
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise Separation("singular Hessian during Newton iteration") from None
        if not np.all(np.isfinite(step)) or np.linalg.norm(step) > _NEWTON_STEP_LIMIT:
            raise Separation("Newton step diverged; labels appear separable")
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            value = nll(candidate)
            if value <= current:
                beta, current = candidate, value
                break
            scale *= 0.5
        else:
            beta = beta + step
            current = nll(beta)
        p = sigmoid(x @ beta)
        ones_saturated = np.all(p[active & (labels == 1.0)] >= 1.0 - PROB_CLIP)
        zeros_saturated = np.all(p[active & (labels == 0.0)] <= PROB_CLIP)
        if ones_saturated or zeros_saturated:
            raise Separation("fitted probabilities saturated for an entire class")
    raise Separation(f"Newton did not converge in {max_iter} iterations")


def _prediction_input(coefficients: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] + 1 != coefficients.shape[0]:
        raise DimensionMismatch(
            f"covariate dimension {x.shape[-1]} does not match model dimension {coefficients.shape[0] - 1}"
        )
    values = coefficients[0] + x @ coefficients[1:]
    return float(values[0]) if squeeze else values


def predict_linear(model: LinearModel, x: np.ndarray) -> float | np.ndarray:
    """Linear prediction at covariate vector(s) x (intercept implied)."""
    return _prediction_input(model.coefficients, x)


def predict_prob(model: LogisticModel, x: np.ndarray) -> float | np.ndarray:
    """Clipped logistic probability at covariate vector(s) x."""
    z = _prediction_input(model.coefficients, x)
    p = np.clip(sigmoid(z), PROB_CLIP, 1.0 - PROB_CLIP)
    return float(p) if np.ndim(p) == 0 else p
