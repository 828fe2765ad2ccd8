"""Joint posterior prediction at unobserved locations.

Test sets are partitioned on top of the training partition, so the training graph
never changes and every test node conditions on training nodes and on test nodes
of earlier subsets. Test nodes of one subset are conditionally independent given
the earlier subsets and are drawn together.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.sparse as sp
from numpy.typing import ArrayLike
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from constants import DEFAULT_SEED, PREDICTION_CACHE_SIZE, IndexKind
from dag import RadialDag, build_dag
from errors import FactorizationError, PartitionError, PredictionError
from geometry import LocationSet
from inference import McmcState, PosteriorDraws, Predictor, RegressionData
from kernels import cov_matrix
from models import KernelSpec
from partition import extend_partition
from precision import (
    ParentGeometry,
    SparseFactor,
    apply_precision,
    build_sparse_factor,
    conditional_coefficients,
    parent_geometry,
)

logger = logging.getLogger(__name__)


def _kernel_key(k: KernelSpec) -> tuple:
    return (k.family, tuple(sorted(k.params.items())))


@dataclass(eq=False)
class PredictionPlan:
    """Extended graph over training and test locations plus per-kernel test coefficients."""

    dag: RadialDag
    training_dag: RadialDag
    n_train: int
    test_index: np.ndarray  # location indices of test nodes in `dag.locations`
    levels: list[np.ndarray]  # groups of test positions drawn together, in graph order
    geometry: ParentGeometry
    cache_size: int = PREDICTION_CACHE_SIZE
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False)

    @property
    def n_test(self) -> int:
        """Number of test locations."""
        return len(self.test_index)

    @property
    def train_points(self) -> np.ndarray:
        """Training coordinates."""
        return self.dag.locations.points[: self.n_train]

    @property
    def test_points(self) -> np.ndarray:
        """Test coordinates, in test order."""
        return self.dag.locations.points[self.test_index]

    def coefficients(self, k: KernelSpec) -> tuple[sp.csr_matrix, np.ndarray]:
        """Kriging weights (rows at test positions) and conditional variances under `k`."""
        key = _kernel_key(k)
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        try:
            rows, cols, values, cond = conditional_coefficients(self.geometry, k)
        except FactorizationError as err:
            row = int(err.context.get("row", -1))
            location = int(self.dag.order[row]) - self.n_train if row >= 0 else None
            raise PredictionError(
                "parent block factorization failed", test_location=location, cause=err.message
            ) from err
        B = sp.csr_matrix((values, (rows, cols)), shape=(self.dag.n, self.dag.n))
        self._cache[key] = (B, cond)
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return B, cond

    def extend(self, new_set: LocationSet, seed: int = DEFAULT_SEED) -> "PredictionPlan":
        """Append another test set; the structure over earlier sets is kept."""
        return build_prediction_plan(self.dag, new_set, seed=seed, training_dag=self.training_dag)


def _parent_locations(dag: RadialDag, loc: int) -> np.ndarray:
    return np.sort(dag.order[dag.parents(int(dag.position[loc]))])


def _check_training_graph(training: RadialDag, extended: RadialDag, n_train: int) -> None:
    for loc in range(n_train):
        if not np.array_equal(_parent_locations(training, loc), _parent_locations(extended, loc)):
            raise PredictionError("training graph changed by extension", location=loc)


def _levels(dag: RadialDag, rows: np.ndarray) -> list[np.ndarray]:
    subsets = dag.subset_of_position[rows]
    levels = []
    for s in np.unique(subsets):
        members = rows[subsets == s]
        # the first subset chains its members through nearest-predecessor edges
        levels.extend(members[:, None] if s == 0 else [members])
    return levels


def build_prediction_plan(
    dag: RadialDag,
    new_set: LocationSet,
    rho: float | None = None,
    seed: int = DEFAULT_SEED,
    training_dag: RadialDag | None = None,
    index_kind: IndexKind = "auto",
) -> PredictionPlan:
    """Extend the partition of `dag` by `new_set` and rebuild the graph over the union."""
    training_dag = training_dag or dag
    _, n_train = training_dag.partition.source_ranges[0]
    try:
        partition = extend_partition(
            dag.partition, new_set, rho=rho, seed=seed, index_kind=index_kind
        )
    except PartitionError as err:
        raise PredictionError(err.message, **err.context) from err
    extended = dag if partition is dag.partition else build_dag(partition)
    _check_training_graph(training_dag, extended, n_train)

    test_index = np.arange(n_train, extended.n)
    rows = np.sort(extended.position[test_index])
    plan = PredictionPlan(
        dag=extended,
        training_dag=training_dag,
        n_train=n_train,
        test_index=test_index,
        levels=_levels(extended, rows),
        geometry=parent_geometry(extended, rows=rows),
    )
    logger.info(f"prediction plan: {plan.n_test} test locations in {len(plan.levels)} levels")
    return plan


def sample_test_nodes(
    plan: PredictionPlan, k: KernelSpec, z_train: ArrayLike, rng: np.random.Generator
) -> np.ndarray:
    """One joint draw of the test values given the training field `z_train`."""
    z_train = np.asarray(z_train, dtype=float)
    if len(z_train) != plan.n_train:
        raise PredictionError(
            "training field has the wrong length", expected=plan.n_train, got=len(z_train)
        )
    if plan.n_test == 0:
        return np.empty(0)
    B, cond = plan.coefficients(k)
    z = np.zeros(plan.dag.n)
    z[plan.dag.position[: plan.n_train]] = z_train
    for rows in plan.levels:
        z[rows] = B[rows] @ z + np.sqrt(cond[rows]) * rng.standard_normal(len(rows))
    return z[plan.dag.position[plan.test_index]]


def latent_predictor(
    plan: PredictionPlan, X_test: np.ndarray | None = None, noisy: bool = False
) -> Predictor:
    """Callback drawing test values from a latent chain state."""

    def predict(state: McmcState, rng: np.random.Generator) -> np.ndarray:
        draw = sample_test_nodes(plan, state.kernel, state.z, rng)
        return _to_response(draw, state.beta, state.sigma2, X_test, noisy, rng)

    return predict


def sample_prediction(
    plan: PredictionPlan,
    draws: PosteriorDraws,
    rng: np.random.Generator,
    X_test: np.ndarray | None = None,
    noisy: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Joint test draws for every retained latent-chain iteration.

    Returns the iteration numbers and a (retained x n_test) array. With `X_test`
    the mean X beta is added; `noisy` adds nugget noise for response-scale draws.
    """
    if draws.latent is None:
        raise PredictionError("posterior draws carry no latent field")
    iterations, values = [], []
    for iteration, beta, sigma2, spec, z in draws.iter_retained():
        draw = sample_test_nodes(plan, spec, z, rng)
        values.append(_to_response(draw, beta, sigma2, X_test, noisy, rng))
        iterations.append(iteration)
    return np.asarray(iterations, dtype=int), _stack(values, plan.n_test)


def _to_response(
    draw: np.ndarray,
    beta: np.ndarray,
    sigma2: float,
    X_test: np.ndarray | None,
    noisy: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    if X_test is not None and len(beta):
        draw = draw + X_test @ beta
    if noisy:
        draw = draw + np.sqrt(sigma2) * rng.standard_normal(len(draw))
    return draw


def _stack(values: list[np.ndarray], m: int) -> np.ndarray:
    return np.vstack(values) if values else np.empty((0, m))


def response_predictive_moments(
    plan: PredictionPlan,
    data: RegressionData,
    k: KernelSpec,
    sigma2: float,
    beta: np.ndarray,
    X_test: np.ndarray | None = None,
    noisy: bool = True,
    factor: SparseFactor | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of the test responses given (beta, sigma2, theta).

    The factor of K + sigma2 I stands in for the inverse training covariance.
    """
    factor = factor or build_sparse_factor(plan.training_dag, k, nugget=sigma2)
    resid = data.Y - data.X @ beta
    cross = cov_matrix(k, plan.test_points, plan.train_points)
    mean = cross @ apply_precision(factor, resid)
    if X_test is not None and len(beta):
        mean = mean + X_test @ beta
    cov = cov_matrix(k, plan.test_points, nugget=sigma2 if noisy else 0.0)
    cov = cov - cross @ apply_precision(factor, cross.T)
    return mean, 0.5 * (cov + cov.T)


def _mvn_draw(
    mean: np.ndarray, cov: np.ndarray, rng: np.random.Generator, scale: float
) -> np.ndarray:
    ridge = [0.0, 1e-10 * scale, 1e-8 * scale, 1e-6 * scale]
    eye = np.eye(len(mean))
    for attempt in Retrying(
        stop=stop_after_attempt(len(ridge)),
        retry=retry_if_exception_type(LinAlgError),
        reraise=True,
    ):
        with attempt:
            chol = cholesky(cov + ridge[attempt.retry_state.attempt_number - 1] * eye, lower=True)
    return mean + chol @ rng.standard_normal(len(mean))


def sample_prediction_response(
    plan: PredictionPlan,
    draws: PosteriorDraws,
    data: RegressionData,
    rng: np.random.Generator,
    X_test: np.ndarray | None = None,
    noisy: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Joint test draws for every retained iteration of a response chain."""
    if plan.n_train != data.n:
        raise PredictionError(
            "plan and data disagree on the training size", plan=plan.n_train, data=data.n
        )
    iterations, values = [], []
    for iteration, beta, sigma2, spec, _ in draws.iter_retained():
        iterations.append(iteration)
        if plan.n_test == 0:
            values.append(np.empty(0))
            continue
        mean, cov = response_predictive_moments(plan, data, spec, sigma2, beta, X_test, noisy)
        try:
            values.append(_mvn_draw(mean, cov, rng, float(np.max(np.diag(cov)))))
        except LinAlgError:
            raise PredictionError(
                "predictive covariance is not positive definite", iteration=iteration
            ) from None
    return np.asarray(iterations, dtype=int), _stack(values, plan.n_test)


def response_predictor(
    plan: PredictionPlan,
    data: RegressionData,
    X_test: np.ndarray | None = None,
    noisy: bool = True,
) -> Predictor:
    """Callback drawing test responses from a response chain state."""

    def predict(state: McmcState, rng: np.random.Generator) -> np.ndarray:
        if plan.n_test == 0:
            return np.empty(0)
        mean, cov = response_predictive_moments(
            plan, data, state.kernel, state.sigma2, state.beta, X_test, noisy
        )
        return _mvn_draw(mean, cov, rng, float(np.max(np.diag(cov))))

    return predict


def radgp_predictive_moments(
    plan: PredictionPlan, k: KernelSpec, z_train: ArrayLike
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian law of `sample_test_nodes`, composed densely from the node conditionals."""
    B, cond = plan.coefficients(k)
    rows = plan.dag.position[plan.test_index]
    train = plan.dag.position[: plan.n_train]
    B_tt = B[rows][:, rows].toarray()
    B_t1 = B[rows][:, train].toarray()
    system = np.eye(plan.n_test) - B_tt
    mean = np.linalg.solve(system, B_t1 @ np.asarray(z_train, dtype=float))
    inv = np.linalg.inv(system)
    cov = (inv * cond[rows]) @ inv.T
    return mean, 0.5 * (cov + cov.T)


def exact_predictive_moments(
    train_points: ArrayLike,
    test_points: ArrayLike,
    k: KernelSpec,
    values: ArrayLike,
    nugget: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Kriging mean and covariance of the full GP at `test_points` given `values`."""
    sigma11 = cov_matrix(k, train_points, nugget=nugget)
    cross = cov_matrix(k, test_points, train_points)
    try:
        chol = cho_factor(sigma11, lower=True)
    except LinAlgError:
        raise PredictionError("training covariance is not positive definite") from None
    mean = cross @ cho_solve(chol, np.asarray(values, dtype=float))
    cov = cov_matrix(k, test_points) - cross @ cho_solve(chol, cross.T)
    return mean, 0.5 * (cov + cov.T)


def quantile_names(level: float) -> tuple[str, str]:
    """Column names of the central interval, e.g. `q025`/`q975` at 0.95."""
    if not 0 < level < 1:
        raise PredictionError("credible level must lie in (0, 1)", level=level)
    lower = (1.0 - level) / 2.0
    return f"q{round(lower * 1000):03d}", f"q{round((1.0 - lower) * 1000):03d}"


def summarize_predictions(
    values: np.ndarray, level: float = 0.95, location_index: ArrayLike | None = None
) -> pd.DataFrame:
    """Posterior mean, sd and central interval per test location."""
    values = np.asarray(values, dtype=float)
    lo_name, hi_name = quantile_names(level)
    m = values.shape[1] if values.ndim == 2 else 0
    index = np.arange(m) if location_index is None else np.asarray(location_index)
    if values.size == 0:
        return pd.DataFrame(
            {"location_index": index[:0], "post_mean": [], "post_sd": [], lo_name: [], hi_name: []}
        )
    lower = (1.0 - level) / 2.0
    ddof = 1 if values.shape[0] > 1 else 0
    return pd.DataFrame(
        {
            "location_index": index,
            "post_mean": values.mean(axis=0),
            "post_sd": values.std(axis=0, ddof=ddof),
            lo_name: np.quantile(values, lower, axis=0),
            hi_name: np.quantile(values, 1.0 - lower, axis=0),
        }
    )


def predictions_frame(iterations: ArrayLike, values: np.ndarray) -> pd.DataFrame:
    """Long format `iteration, location_index, value`."""
    values = np.asarray(values, dtype=float)
    iterations = np.asarray(iterations, dtype=int)
    m = values.shape[1] if values.ndim == 2 else 0
    return pd.DataFrame(
        {
            "iteration": np.repeat(iterations, m),
            "location_index": np.tile(np.arange(m), len(iterations)),
            "value": values.reshape(-1),
        }
    )
