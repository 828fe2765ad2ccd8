import numpy as np
import pytest

from geometry import LocationSet
from inference import RegressionData
from models import KernelSpec


def _grid(side: int, dim: int = 2) -> LocationSet:
    axis = np.linspace(0.0, 1.0, side)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return LocationSet(np.column_stack([m.ravel() for m in mesh]))


def _uniform(n: int, dim: int = 2, seed: int = 0) -> LocationSet:
    return LocationSet(np.random.default_rng(seed).uniform(size=(n, dim)))


@pytest.fixture
def grid():
    return _grid


@pytest.fixture
def uniform():
    return _uniform


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def exp_kernel():
    return KernelSpec(family="exponential", params={"tau2": 1.0, "phi": 19.97})


@pytest.fixture(
    params=[
        KernelSpec(family="exponential", params={"tau2": 1.5, "phi": 6.0}),
        KernelSpec(family="matern", params={"sigma2": 1.0, "alpha": 5.0, "nu": 1.5}),
        KernelSpec(family="gaussian", params={"sigma2": 2.0, "a": 3.0}),
        KernelSpec(
            family="generalized_cauchy",
            params={"sigma2": 1.0, "alpha": 0.3, "delta": 1.0, "lam": 4.0},
        ),
    ],
    ids=lambda k: k.family,
)
def any_kernel(request):
    return request.param


@pytest.fixture
def small_data():
    """36 grid locations with a smooth signal plus noise and one covariate."""
    locations = _grid(6)
    rng = np.random.default_rng(7)
    x = locations.points
    X = rng.standard_normal((len(locations), 1))
    Y = np.sin(3 * x[:, 0]) + np.cos(2 * x[:, 1]) + 0.5 * X[:, 0] + 0.1 * rng.standard_normal(36)
    return RegressionData(locations=locations, Y=Y, X=X)
