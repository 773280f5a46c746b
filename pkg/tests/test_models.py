import numpy as np
import pytest

from ecborrow import (
    DesignMatrix,
    LinearModel,
    LogisticModel,
    fit_linear_wls,
    fit_logistic,
    predict_linear,
    predict_prob,
)
from ecborrow.errors import DimensionMismatch, NoVariation, Separation, SingularDesign


def design(*xs):
    return DesignMatrix.from_covariates(np.array(xs, dtype=float))


def test_wls_two_point_interpolation():
    model = fit_linear_wls(design(0.0, 1.0), np.array([0.0, 2.0]), np.ones(2))
    assert model.coefficients == pytest.approx([0.0, 2.0], abs=1e-12)


def test_wls_weight_scale_invariance():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([1.0, 0.5, 2.0, 1.5])
    base = fit_linear_wls(design(*x), y, np.ones(4))
    scaled = fit_linear_wls(design(*x), y, np.full(4, 7.5))
    assert scaled.coefficients == pytest.approx(base.coefficients, abs=1e-12)


def test_wls_hand_solved_normal_equations():
    # points (0,1),(1,1),(1,3), weights (1,1,2):
    # X'WX = [[4,3],[3,3]], X'Wy = (8,7)  =>  gamma = (1, 4/3)
    model = fit_linear_wls(design(0.0, 1.0, 1.0), np.array([1.0, 1.0, 3.0]), np.array([1.0, 1.0, 2.0]))
    assert model.coefficients == pytest.approx([1.0, 4.0 / 3.0], abs=1e-12)


def test_wls_stationarity_of_weighted_score():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((30, 3))
    dm = DesignMatrix.from_covariates(x)
    y = rng.standard_normal(30)
    w = rng.random(30)
    model = fit_linear_wls(dm, y, w)
    score = dm.rows.T @ (w * (y - dm.rows @ model.coefficients))
    assert np.max(np.abs(score)) <= 1e-8 * (1.0 + np.max(np.abs(dm.rows.T @ (w * y))))


def test_wls_duplicated_row_equals_weight_increment():
    x = np.array([0.0, 1.0, 2.0, 1.0])
    y = np.array([1.0, 2.0, 1.5, 2.0])
    dup = fit_linear_wls(design(*x, 1.0), np.append(y, 2.0), np.ones(5))
    weighted = fit_linear_wls(design(*x), y, np.array([1.0, 2.0, 1.0, 1.0]))
    # fourth row (1.0, 2.0) duplicated once == weight 2 on one copy
    assert dup.coefficients == pytest.approx(weighted.coefficients, abs=1e-10)


def test_wls_singular_design():
    rows = np.column_stack([np.ones(4), np.arange(4.0), 2.0 * np.arange(4.0)])
    with pytest.raises(SingularDesign):
        fit_linear_wls(DesignMatrix(rows), np.zeros(4), np.ones(4))


def test_wls_underdetermined():
    with pytest.raises(SingularDesign):
        fit_linear_wls(design(1.0), np.array([1.0]), np.ones(1))


def test_wls_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        fit_linear_wls(design(0.0, 1.0), np.array([1.0]), np.ones(2))


def test_logistic_intercept_only_closed_form():
    dm = DesignMatrix(np.ones((4, 1)))
    model = fit_logistic(dm, np.array([1.0, 1.0, 1.0, 0.0]), np.ones(4))
    assert model.coefficients == pytest.approx([np.log(3.0)], abs=1e-8)


def test_logistic_balanced_labels_give_zero():
    dm = DesignMatrix(np.ones((4, 1)))
    model = fit_logistic(dm, np.array([1.0, 0.0, 1.0, 0.0]), np.ones(4))
    assert model.coefficients == pytest.approx([0.0], abs=1e-10)


def test_logistic_no_variation():
    dm = DesignMatrix(np.ones((4, 1)))
    with pytest.raises(NoVariation):
        fit_logistic(dm, np.ones(4), np.ones(4))
    # variation only outside the positive weights counts as none
    with pytest.raises(NoVariation):
        fit_logistic(dm, np.array([1.0, 1.0, 1.0, 0.0]), np.array([1.0, 1.0, 1.0, 0.0]))


def test_logistic_separation():
    with pytest.raises(Separation):
        fit_logistic(design(-2.0, -1.0, 1.0, 2.0), np.array([0.0, 0.0, 1.0, 1.0]), np.ones(4))


def test_logistic_score_zero_and_likelihood_improves():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((60, 2))
    dm = DesignMatrix.from_covariates(x)
    z = 0.3 + x @ np.array([0.8, -0.5])
    labels = (rng.random(60) < 1.0 / (1.0 + np.exp(-z))).astype(float)
    w = rng.random(60) + 0.5
    model = fit_logistic(dm, labels, w)
    p = 1.0 / (1.0 + np.exp(-(dm.rows @ model.coefficients)))
    score = dm.rows.T @ (w * (labels - p))
    assert np.max(np.abs(score)) <= 1e-8 * dm.n

    def nll(beta):
        zb = dm.rows @ beta
        return np.sum(w * (np.logaddexp(0.0, zb) - labels * zb))

    assert nll(model.coefficients) <= nll(np.zeros(3))


def test_logistic_duplicated_row_equals_weight_increment():
    x = np.array([-1.0, 0.0, 1.0, 0.5])
    labels = np.array([0.0, 1.0, 1.0, 0.0])
    dup = fit_logistic(design(*x, 0.5), np.append(labels, 0.0), np.ones(5))
    weighted = fit_logistic(design(*x), labels, np.array([1.0, 1.0, 1.0, 2.0]))
    assert dup.coefficients == pytest.approx(weighted.coefficients, abs=1e-10)


def test_predictions():
    linear = LinearModel(np.array([1.0, 2.0]))
    assert predict_linear(linear, np.array([3.0])) == pytest.approx(7.0)
    assert predict_linear(LinearModel(np.zeros(2)), np.array([3.0])) == 0.0
    logistic = LogisticModel(np.zeros(2))
    assert predict_prob(logistic, np.array([3.0])) == pytest.approx(0.5)
    hot = LogisticModel(np.array([0.0, 40.0]))
    assert predict_prob(hot, np.array([1.0])) == pytest.approx(1.0 - 1e-6)
    assert predict_prob(hot, np.array([-1.0])) == pytest.approx(1e-6)


def test_prediction_vectorized_and_dimension_checked():
    linear = LinearModel(np.array([1.0, 2.0]))
    values = predict_linear(linear, np.array([[3.0], [0.0]]))
    assert values == pytest.approx([7.0, 1.0])
    with pytest.raises(DimensionMismatch):
        predict_linear(linear, np.array([1.0, 2.0]))
    with pytest.raises(DimensionMismatch):
        predict_prob(LogisticModel(np.zeros(3)), np.array([1.0]))


def test_design_matrix_requires_intercept():
    with pytest.raises(DimensionMismatch):
        DesignMatrix(np.array([[0.0, 1.0], [1.0, 2.0]]))
