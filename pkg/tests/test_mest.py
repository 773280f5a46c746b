import numpy as np
import pytest

from ecborrow import (
    Block,
    EstimatingStack,
    TrialDataset,
    fit_hstar,
    fit_participation_model,
    aipw_psi,
    numerical_jacobian,
    sandwich_covariance,
    solve_stack,
)
from ecborrow.errors import (
    BlockSolveFailed,
    NonFiniteDerivative,
    NoVariation,
    ResidualCheckFailed,
    SingularBread,
)
from ecborrow.estimators import (
    _diff_block,
    _hstar_block,
    _known_propensity,
    _participation_block,
    _psi_block,
    _q_block,
)
from ecborrow.mest import SolveOptions, StackData

from conftest import make_linear_dataset


def dataset_from_y(y, s=None, a=None):
    y = np.asarray(y, dtype=float)
    n = len(y)
    return TrialDataset(
        x=np.zeros((n, 1)),
        s=np.ones(n, dtype=int) if s is None else np.asarray(s),
        a=np.zeros(n, dtype=int) if a is None else np.asarray(a),
        y=y,
        covariate_names=("X1",),
        p1=0.5,
    )


def mean_block(name="theta"):
    def values(data, theta):
        return (data.y - theta[name][0])[:, None]

    def solve(data, theta, options):
        return np.array([data.y.mean()])

    return Block(name, 1, values, solve)


def chained_identity_block(name, upstream):
    def values(data, theta):
        return np.full((data.n, 1), theta[upstream][0] - theta[name][0])

    def solve(data, theta, options):
        return np.array([theta[upstream][0]])

    return Block(name, 1, values, solve, (upstream,))


def test_mean_stack_solution():
    ds = dataset_from_y([1.0, 2.0, 3.0], s=[1, 1, 0], a=[1, 0, 0])
    solution = solve_stack(EstimatingStack([mean_block()]), ds)
    assert solution.scalar("theta") == pytest.approx(2.0, abs=1e-14)


def test_chained_identity_blocks():
    ds = dataset_from_y([1.0, 2.0, 3.0], s=[1, 1, 0], a=[1, 0, 0])
    stack = EstimatingStack([mean_block("mu"), chained_identity_block("psi", "mu")])
    solution = solve_stack(stack, ds)
    assert solution.scalar("psi") == solution.scalar("mu") == pytest.approx(2.0)
    sw = sandwich_covariance(stack, ds, solution)
    assert sw.variance("psi") == pytest.approx(sw.variance("mu"), rel=1e-10)


def test_mean_stack_sandwich_oracle():
    # Var(mean) on {1,2,3}: sum((y - ybar)^2) / n^2 = 2/9
    ds = dataset_from_y([1.0, 2.0, 3.0], s=[1, 1, 0], a=[1, 0, 0])
    stack = EstimatingStack([mean_block()])
    sw = sandwich_covariance(stack, ds, solve_stack(stack, ds))
    assert sw.variance("theta") == pytest.approx(2.0 / 9.0, abs=1e-10)


def test_constant_data_zero_variance():
    ds = dataset_from_y([5.0, 5.0], s=[1, 0], a=[1, 0])
    stack = EstimatingStack([mean_block()])
    sw = sandwich_covariance(stack, ds, solve_stack(stack, ds))
    assert sw.variance("theta") == pytest.approx(0.0, abs=1e-12)


def test_jacobian_of_mean_block():
    ds = dataset_from_y([1.0, 2.0, 3.0], s=[1, 1, 0], a=[1, 0, 0])
    stack = EstimatingStack([mean_block()])
    jac = numerical_jacobian(stack, ds, np.array([2.0]))
    assert jac[0, 0] == pytest.approx(-1.0, abs=1e-9)


def test_jacobian_quadratic_block():
    def values(data, theta):
        return np.full((data.n, 1), theta["t"][0] ** 2)

    block = Block("t", 1, values, lambda d, t, o: np.array([3.0]))
    ds = dataset_from_y([0.0, 0.0])
    jac = numerical_jacobian(EstimatingStack([block]), ds, np.array([3.0]))
    assert jac[0, 0] == pytest.approx(6.0, abs=1e-6)


def test_jacobian_matches_analytic_logistic_hessian():
    ds = make_linear_dataset(5, n1=30, n0=60)
    block = _participation_block(ds.d + 1)
    stack = EstimatingStack([block])
    beta = solve_stack(stack, ds).theta
    jac = numerical_jacobian(stack, ds, beta)

    data = StackData.from_dataset(ds)
    p = 1.0 / (1.0 + np.exp(-(data.xt @ beta)))
    w = (1.0 - data.a) * p * (1.0 - p)
    analytic = -(data.xt * w[:, None]).T @ data.xt / data.n
    assert np.max(np.abs(jac - analytic)) <= 1e-5 * np.max(np.abs(analytic))


def test_four_block_stack_matches_sequential_composition():
    # independent path: models/estimators routines called one at a time
    ds = make_linear_dataset(9, n1=10, n0=14, d=1)
    stack = EstimatingStack(
        [
            _q_block(),
            _participation_block(ds.d + 1),
            _hstar_block(ds.d + 1, True, _known_propensity, False),
            _psi_block("psi0", 0, "hstar", _known_propensity, False),
        ]
    )
    solution = solve_stack(stack, ds)

    assert solution.scalar("q") == pytest.approx(ds.q_hat, abs=1e-14)
    eta0 = fit_participation_model(ds)
    assert solution["eta0"] == pytest.approx(eta0.coefficients, abs=1e-12)
    hstar = fit_hstar(ds, eta0)
    assert solution["hstar"] == pytest.approx(hstar.coefficients, abs=1e-12)
    assert solution.scalar("psi0") == pytest.approx(aipw_psi(ds, 0, hstar), abs=1e-12)


def test_row_permutation_invariance():
    ds = make_linear_dataset(13, n1=20, n0=30, d=2)
    stack_blocks = lambda: [
        _q_block(),
        _participation_block(3),
        _hstar_block(3, True, _known_propensity, False),
        _psi_block("psi0", 0, "hstar", _known_propensity, False),
    ]
    stack = EstimatingStack(stack_blocks())
    base = solve_stack(stack, ds)
    base_sw = sandwich_covariance(stack, ds, base)

    rng = np.random.default_rng(0)
    order = rng.permutation(ds.n)
    shuffled = TrialDataset(
        x=ds.x[order],
        s=ds.s[order],
        a=ds.a[order],
        y=ds.y[order],
        covariate_names=ds.covariate_names,
        p1=ds.p1,
    )
    other = solve_stack(stack, shuffled)
    other_sw = sandwich_covariance(stack, shuffled, other)
    scale = np.max(np.abs(base.theta))
    assert np.max(np.abs(base.theta - other.theta)) <= 1e-10 * scale
    cov_scale = np.max(np.abs(base_sw.covariance))
    assert np.max(np.abs(base_sw.covariance - other_sw.covariance)) <= 1e-10 * cov_scale


def test_delta_method_identity_for_difference_block():
    ds = make_linear_dataset(21, n1=30, n0=40, d=1)
    stack = EstimatingStack(
        [
            _q_block(),
            _participation_block(2),
            _hstar_block(2, True, _known_propensity, False),
            _psi_block("psi0", 0, "hstar", _known_propensity, False),
            _psi_block("psi1", 1, None, _known_propensity, False),
            _diff_block("tau", "psi1", "psi0"),
        ]
    )
    sw = sandwich_covariance(stack, ds, solve_stack(stack, ds))
    expected = (
        sw.variance("psi1")
        + sw.variance("psi0")
        - 2.0 * sw.covariance_entry("psi1", "psi0")
    )
    assert sw.variance("tau") == pytest.approx(expected, rel=1e-6)


def test_joint_sandwich_differs_from_fixed_nuisance_shortcut():
    # treating (q, beta, gamma) as known would change the reported SE
    ds = make_linear_dataset(33, n1=24, n0=40, d=1)
    stack = EstimatingStack(
        [
            _q_block(),
            _participation_block(2),
            _hstar_block(2, True, _known_propensity, False),
            _psi_block("psi0", 0, "hstar", _known_propensity, False),
        ]
    )
    solution = solve_stack(stack, ds)
    joint = sandwich_covariance(stack, ds, solution)

    gamma = solution["hstar"]
    frozen_h = Block(
        "psi0",
        1,
        lambda data, theta: (
            (data.s / ds.q_hat)
            * (
                (1.0 - data.a) / (1.0 - data.p1) * (data.y - data.xt @ gamma)
                + data.xt @ gamma
                - theta["psi0"][0]
            )
        )[:, None],
        lambda data, theta, options: np.array(
            [
                np.sum(
                    data.s
                    * ((1.0 - data.a) / (1.0 - data.p1) * (data.y - data.xt @ gamma) + data.xt @ gamma)
                )
                / np.sum(data.s)
            ]
        ),
    )
    shortcut_stack = EstimatingStack([frozen_h])
    shortcut = sandwich_covariance(shortcut_stack, ds, solve_stack(shortcut_stack, ds))
    assert abs(joint.variance("psi0") - shortcut.variance("psi0")) > 1e-12


def test_structured_jacobian_matches_dense():
    ds = make_linear_dataset(44, n1=20, n0=30, d=2)
    stack = EstimatingStack(
        [
            _q_block(),
            _participation_block(3),
            _hstar_block(3, True, _known_propensity, False),
            _psi_block("psi0", 0, "hstar", _known_propensity, False),
        ]
    )
    theta = solve_stack(stack, ds).theta
    sparse = numerical_jacobian(stack, ds, theta, use_structure=True)
    dense = numerical_jacobian(stack, ds, theta, use_structure=False)
    assert np.max(np.abs(sparse - dense)) <= 1e-12 * max(1.0, np.max(np.abs(dense)))


def test_residual_check_catches_mismatched_solver():
    def values(data, theta):
        return (data.y - theta["t"][0])[:, None]

    broken = Block("t", 1, values, lambda d, t, o: np.array([0.0]))
    ds = dataset_from_y([1.0, 2.0, 3.0])
    with pytest.raises(ResidualCheckFailed):
        solve_stack(EstimatingStack([broken]), ds)


def test_block_solve_failed_wraps_model_errors():
    ds = make_linear_dataset(3, n1=10, n0=0 + 12, d=1)
    all_external_controls = TrialDataset(
        x=ds.x,
        s=np.where(ds.a == 1, 1, 0),  # every control row external
        a=ds.a,
        y=ds.y,
        covariate_names=ds.covariate_names,
        p1=0.5,
    )
    stack = EstimatingStack([_q_block(), _participation_block(2)])
    with pytest.raises(BlockSolveFailed) as excinfo:
        solve_stack(stack, all_external_controls)
    assert isinstance(excinfo.value.cause, NoVariation)


def test_singular_bread():
    def values(data, theta):
        return np.zeros((data.n, 1))

    block = Block("t", 1, values, lambda d, t, o: np.array([0.0]))
    ds = dataset_from_y([1.0, 2.0])
    stack = EstimatingStack([block])
    with pytest.raises(SingularBread):
        sandwich_covariance(stack, ds, solve_stack(stack, ds))


def test_non_finite_derivative():
    def values(data, theta):
        return np.full((data.n, 1), np.sqrt(theta["t"][0]))

    block = Block("t", 1, values, lambda d, t, o: np.array([0.0]))
    ds = dataset_from_y([1.0, 2.0])
    with pytest.raises(NonFiniteDerivative):
        numerical_jacobian(EstimatingStack([block]), ds, np.array([0.0]))


def test_cycle_detection():
    a = Block("a", 1, lambda d, t: np.zeros((d.n, 1)), lambda d, t, o: np.zeros(1), ("b",))
    b = Block("b", 1, lambda d, t: np.zeros((d.n, 1)), lambda d, t, o: np.zeros(1), ("a",))
    with pytest.raises(ValueError):
        EstimatingStack([a, b])


def test_sandwich_matrix_shape_invariants():
    ds = make_linear_dataset(55, n1=30, n0=30, d=1)
    stack = EstimatingStack(
        [
            _q_block(),
            _participation_block(2),
            _hstar_block(2, True, _known_propensity, False),
            _psi_block("psi0", 0, "hstar", _known_propensity, False),
        ]
    )
    solution = solve_stack(stack, ds)
    sw = sandwich_covariance(stack, ds, solution)
    asymmetry = np.max(np.abs(sw.covariance - sw.covariance.T))
    assert asymmetry <= 1e-10 * max(1.0, np.max(np.abs(sw.covariance)))
    assert np.all(np.diag(sw.covariance) >= -1e-15)
    assert sw.residual_norm <= SolveOptions().tol
