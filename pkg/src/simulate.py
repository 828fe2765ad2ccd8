"""Synthetic spatial datasets drawn from a Gaussian process plus nugget."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cholesky
from scipy.sparse import identity
from scipy.sparse.linalg import spsolve_triangular
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from constants import DEFAULT_DENSE_SIMULATION_CAP, DEFAULT_SEED, Layout
from dag import build_dag
from errors import SimulationError
from geometry import LocationSet
from kernels import cov_matrix, make_kernel
from models import KernelSpec
from partition import partition_locations
from precision import build_sparse_factor

logger = logging.getLogger(__name__)


def layout_points(layout: Layout, n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """`n` points in [0, 1]^dim, either a full regular grid or i.i.d. uniform."""
    if n < 0:
        raise SimulationError("number of locations must be nonnegative", n=n)
    if layout == "uniform":
        return rng.uniform(size=(n, dim))
    side = int(round(n ** (1.0 / dim))) if n else 0
    if side**dim != n:
        raise SimulationError("grid size must be a perfect power of the dimension", n=n, dim=dim)
    axis = np.linspace(0.0, 1.0, side) if side > 1 else np.array([0.5])
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.column_stack([m.ravel() for m in mesh]) if n else np.empty((0, dim))


def _dense_field(locations: LocationSet, k: KernelSpec, rng: np.random.Generator) -> np.ndarray:
    cov = cov_matrix(k, locations)
    scale = make_kernel(k).variance
    ridge = [0.0, 1e-12 * scale, 1e-10 * scale, 1e-8 * scale]
    for attempt in Retrying(
        stop=stop_after_attempt(len(ridge)),
        retry=retry_if_exception_type(LinAlgError),
        reraise=True,
    ):
        with attempt:
            extra = ridge[attempt.retry_state.attempt_number - 1]
            if extra:
                logger.warning(
                    f"covariance not positive definite, adding {extra:g} to the diagonal"
                )
            chol = cholesky(cov + extra * np.eye(len(cov)), lower=True)
    return chol @ rng.standard_normal(len(cov))


def _blocked_field(
    locations: LocationSet, k: KernelSpec, rho: float, seed: int, rng: np.random.Generator
) -> np.ndarray:
    factor = build_sparse_factor(build_dag(partition_locations(locations, rho, seed)), k)
    system = (identity(factor.n, format="csr") - factor.B_hat).tocsr()
    noise = np.sqrt(factor.D_hat) * rng.standard_normal(factor.n)
    zp = spsolve_triangular(system, noise, lower=True)
    return factor.to_locations(zp)


def simulate_field(
    locations: LocationSet,
    k: KernelSpec,
    rng: np.random.Generator,
    dense_cap: int = DEFAULT_DENSE_SIMULATION_CAP,
    blocked: bool = False,
    blocked_rho: float = 0.2,
    seed: int = DEFAULT_SEED,
) -> np.ndarray:
    """One zero-mean field draw at `locations`.

    Up to `dense_cap` locations the exact covariance is factorized; above it a
    large-radius radial neighbors draw is used, and only when `blocked` is set.
    """
    n = len(locations)
    if n == 0:
        return np.empty(0)
    if n <= dense_cap:
        return _dense_field(locations, k, rng)
    if not blocked:
        raise SimulationError(
            "too many locations for dense simulation; enable blocked simulation",
            n=n,
            cap=dense_cap,
        )
    logger.info(f"blocked simulation of {n} locations at rho={blocked_rho}")
    return _blocked_field(locations, k, blocked_rho, seed, rng)


@dataclass(frozen=True)
class SimulatedData:
    """Training table, test table and held-out truth."""

    train: pd.DataFrame  # x1..xd, y, cov_*
    test: pd.DataFrame  # x1..xd, cov_*
    truth: pd.DataFrame  # location_index, value, latent


def simulate_dataset(
    k: KernelSpec,
    n_train: int,
    n_test: int,
    nugget_sd: float,
    seed: int = DEFAULT_SEED,
    dim: int = 2,
    layout: Layout = "grid",
    test_layout: Layout = "uniform",
    beta: list[float] | None = None,
    dense_cap: int = DEFAULT_DENSE_SIMULATION_CAP,
    blocked: bool = False,
    blocked_rho: float = 0.2,
) -> SimulatedData:
    """Draw training and test data jointly from Y = X beta + Z + noise."""
    if nugget_sd < 0:
        raise SimulationError("nugget standard deviation must be nonnegative", nugget_sd=nugget_sd)
    rng = np.random.default_rng(seed)
    train_pts = layout_points(layout, n_train, dim, rng)
    test_pts = layout_points(test_layout, n_test, dim, rng)
    locations = LocationSet(np.vstack([train_pts, test_pts]))
    z = simulate_field(locations, k, rng, dense_cap, blocked, blocked_rho, seed)

    beta_arr = np.asarray(beta or [], dtype=float)
    X = rng.standard_normal((len(locations), len(beta_arr)))
    y = X @ beta_arr + z + nugget_sd * rng.standard_normal(len(locations))

    coords = [f"x{j + 1}" for j in range(dim)]
    covs = [f"cov_{j + 1}" for j in range(len(beta_arr))]
    frame = pd.DataFrame(locations.points, columns=coords)
    if covs:
        frame[covs] = X
    train = frame.iloc[:n_train].assign(y=y[:n_train])[[*coords, "y", *covs]]
    test = frame.iloc[n_train:].reset_index(drop=True)
    truth = pd.DataFrame(
        {"location_index": np.arange(n_test), "value": y[n_train:], "latent": z[n_train:]}
    )
    logger.info(f"simulated {n_train} training and {n_test} test locations ({k.family})")
    return SimulatedData(train=train.reset_index(drop=True), test=test, truth=truth)
