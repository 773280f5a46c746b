import numpy as np
import pytest

from ecborrow import TrialDataset


@pytest.fixture
def four_trial_rows():
    """Trial rows (A,Y) = (1,2),(0,1),(1,4),(0,3) plus two externals, p1=0.5."""
    return TrialDataset(
        x=np.array([[0.5], [-0.3], [0.8], [0.1], [0.0], [1.0]]),
        s=np.array([1, 1, 1, 1, 0, 0]),
        a=np.array([1, 0, 1, 0, 0, 0]),
        y=np.array([2.0, 1.0, 4.0, 3.0, 1.5, 2.5]),
        covariate_names=("X1",),
        p1=0.5,
    )


def make_linear_dataset(seed, n1=40, n0=80, d=2, tau=2.0, shift=0.0, noise=1.0, p1=0.5):
    """Exchangeable-by-default linear DGP used across the unit tests."""
    rng = np.random.default_rng(seed)
    n = n1 + n0
    s = np.zeros(n, dtype=int)
    s[:n1] = 1
    a = np.zeros(n, dtype=int)
    a[:n1] = (rng.random(n1) < p1).astype(int)
    x = rng.standard_normal((n, d))
    coef = np.linspace(1.0, 0.5, d)
    y = 1.0 + x @ coef + a * tau + shift * s + noise * rng.standard_normal(n)
    return TrialDataset(
        x=x,
        s=s,
        a=a,
        y=y,
        covariate_names=tuple(f"X{j+1}" for j in range(d)),
        p1=p1,
    )
