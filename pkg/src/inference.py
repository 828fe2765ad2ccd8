"""Posterior sampling for spatial regression with a radial neighbors process.

Two samplers share the building blocks below:

* the latent-effects sampler draws beta and sigma2 from their conjugate full
  conditionals, the latent field through a conjugate gradient solve, and the
  covariance parameters with a Metropolis step on log scale;
* the response sampler integrates the latent field out, using the factor of the
  nugget-augmented kernel, and moves (sigma2, theta) jointly with a robust adaptive
  Metropolis proposal.
"""

import logging
import math
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import LinearOperator, cg
from scipy.spatial.distance import pdist
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
)

from constants import DEFAULT_SEED, KernelFamily, ModelKind
from dag import RadialDag, build_dag
from errors import (
    CgConvergenceError,
    FactorizationError,
    InferenceError,
    RadgpError,
)
from geometry import LocationSet
from kernels import make_kernel
from models import CgConfig, KernelSpec, MhConfig, PriorSpec, ThetaPrior
from partition import partition_locations
from precision import (
    SparseFactor,
    apply_precision,
    apply_sqrt_factor,
    build_sparse_factor,
    log_density,
    precision_diagonal,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RegressionData:
    """Training responses `Y`, covariates `X` (n x p, p may be 0) and locations."""

    locations: LocationSet
    Y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(len(Y), -1) if X.size else np.empty((len(Y), 0))
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)
        if not (len(Y) == X.shape[0] == len(self.locations)):
            raise InferenceError(
                "row counts disagree", n_y=len(Y), n_x=X.shape[0], n_locations=len(self.locations)
            )
        if not (np.all(np.isfinite(Y)) and np.all(np.isfinite(X))):
            raise InferenceError("responses and covariates must be finite")

    @classmethod
    def without_covariates(cls, locations: LocationSet, Y: ArrayLike) -> "RegressionData":
        """Data with p = 0."""
        X = np.empty((len(locations), 0))
        return cls(locations=locations, Y=np.asarray(Y, dtype=float), X=X)

    @property
    def n(self) -> int:
        """Number of observations."""
        return len(self.Y)

    @property
    def p(self) -> int:
        """Number of covariates."""
        return self.X.shape[1]


class _Prior(Protocol):
    def log_density(self, value: float) -> float: ...


class RobustAdaptiveMetropolis:
    """Gaussian random walk whose shape adapts toward a target acceptance rate.

    The proposal factor S is updated after each step so that
    S S^T <- S (I + eta (alpha - target) u u^T / |u|^2) S^T with
    eta = min(1, dim * step^-exponent); adaptation can be frozen.
    """

    def __init__(self, dim: int, config: MhConfig | None = None):
        config = config or MhConfig()
        self.dim = dim
        self.target = config.target_acceptance
        self.exponent = config.adapt_exponent
        self.adapting = config.adapt and config.proposal_scale > 0
        self.S = config.proposal_scale * np.eye(dim)
        self.steps = 0
        self.accepted = 0
        self.steps_frozen = 0
        self.support_rejections = 0
        self.accepted_frozen = 0
        self.frozen = False
        self._last: np.ndarray | None = None

    def propose(self, rng: np.random.Generator) -> np.ndarray:
        """Random-walk increment."""
        self._last = rng.standard_normal(self.dim)
        return self.S @ self._last

    def record(self, accepted: bool, accept_prob: float) -> None:
        """Book-keep one step and adapt the proposal shape."""
        self.steps += 1
        self.accepted += int(accepted)
        if self.frozen:
            self.steps_frozen += 1
            self.accepted_frozen += int(accepted)
        u = self._last
        self._last = None
        if not self.adapting or self.frozen or u is None:
            return
        norm2 = float(u @ u)
        if norm2 == 0:
            return
        eta = min(1.0, self.dim * self.steps ** (-self.exponent))
        inner = np.eye(self.dim) + eta * (accept_prob - self.target) * np.outer(u, u) / norm2
        self.S = cholesky(self.S @ inner @ self.S.T, lower=True)

    def freeze(self) -> None:
        """Stop adapting; later steps count toward the post-adaptation rate."""
        self.frozen = True

    @property
    def acceptance_rate(self) -> float:
        """Acceptance over all steps."""
        return self.accepted / self.steps if self.steps else math.nan

    @property
    def frozen_acceptance_rate(self) -> float:
        """Acceptance over steps taken after `freeze`."""
        return self.accepted_frozen / self.steps_frozen if self.steps_frozen else math.nan


@dataclass(eq=False)
class McmcState:
    """Current values of one chain."""

    beta: np.ndarray
    sigma2: float
    theta: dict[str, float]
    family: KernelFamily
    mh: RobustAdaptiveMetropolis
    z: np.ndarray | None = None
    factor: SparseFactor | None = None
    jitter: float = 0.0
    cg_iterations: list[int] = field(default_factory=list)

    @property
    def kernel(self) -> KernelSpec:
        """Kernel at the current parameters."""
        return KernelSpec(family=self.family, params=self.theta)


@dataclass(eq=False)
class PosteriorDraws:
    """Per-iteration parameter records and, for retained iterations, field draws."""

    model: ModelKind
    family: KernelFamily
    frame: pd.DataFrame  # iteration, retained, beta_*, sigma2, theta_*
    l1: int
    l2: int
    latent: np.ndarray | None = None  # retained x n, location order
    predictions: np.ndarray | None = None  # retained x m
    acceptance_rate: float = math.nan
    post_burn_acceptance_rate: float = math.nan
    cg_iterations: list[int] = field(default_factory=list)
    seed: int = DEFAULT_SEED

    @property
    def theta_names(self) -> list[str]:
        """Kernel parameter names, in column order."""
        return [c[len("theta_") :] for c in self.frame.columns if c.startswith("theta_")]

    @property
    def beta_columns(self) -> list[str]:
        """Regression coefficient columns."""
        return [c for c in self.frame.columns if c.startswith("beta_")]

    def retained(self) -> pd.DataFrame:
        """Rows kept after burn-in and thinning."""
        return self.frame[self.frame["retained"]].reset_index(drop=True)

    def iter_retained(
        self,
    ) -> Iterator[tuple[int, np.ndarray, float, KernelSpec, np.ndarray | None]]:
        """(iteration, beta, sigma2, kernel, latent) for every retained iteration."""
        rows = self.retained()
        for k, row in rows.iterrows():
            spec = KernelSpec(
                family=self.family, params={n: float(row[f"theta_{n}"]) for n in self.theta_names}
            )
            z = self.latent[k] if self.latent is not None else None
            yield int(row["iteration"]), row[self.beta_columns].to_numpy(float), float(
                row["sigma2"]
            ), spec, z

    def posterior_means(self) -> dict[str, float]:
        """Means of every parameter column over retained iterations."""
        rows = self.retained().drop(columns=["iteration", "retained", "chain"], errors="ignore")
        return {k: float(v) for k, v in rows.mean().items()}

    def metadata(self) -> dict[str, Any]:
        """Run summary for the metadata file."""
        cg_stats = (
            {
                "cg_mean_iterations": float(np.mean(self.cg_iterations)),
                "cg_max_iterations": int(np.max(self.cg_iterations)),
            }
            if self.cg_iterations
            else {}
        )
        return {
            "model": self.model,
            "family": self.family,
            "seed": int(self.seed),
            "l1": self.l1,
            "l2": self.l2,
            "acceptance_rate": float(self.acceptance_rate),
            "post_burn_acceptance_rate": float(self.post_burn_acceptance_rate),
            **cg_stats,
        }


def sample_beta(
    state: McmcState, data: RegressionData, prior: PriorSpec, rng: np.random.Generator
) -> np.ndarray:
    """Draw beta from its normal full conditional given the latent field."""
    if data.p == 0:
        return np.empty(0)
    z = state.z if state.z is not None else np.zeros(data.n)
    mean0, prec0 = prior.beta.arrays(data.p)
    precision = prec0 + data.X.T @ data.X / state.sigma2
    rhs = prec0 @ mean0 + data.X.T @ (data.Y - z) / state.sigma2
    return _gaussian_draw(precision, rhs, rng)


def _gaussian_draw(precision: np.ndarray, rhs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(precision^-1 rhs, precision^-1)."""
    try:
        chol = cholesky(precision, lower=True)
    except LinAlgError:
        raise InferenceError("beta posterior precision is singular") from None
    mean = cho_solve((chol, True), rhs)
    return mean + solve_triangular(chol.T, rng.standard_normal(len(rhs)), lower=False)


def sample_sigma2(
    state: McmcState, data: RegressionData, prior: PriorSpec, rng: np.random.Generator
) -> float:
    """Draw the nugget variance from its inverse-gamma full conditional."""
    z = state.z if state.z is not None else np.zeros(data.n)
    resid = data.Y - data.X @ state.beta - z
    shape = prior.sigma2.a0 + data.n / 2.0
    scale = prior.sigma2.b0 + 0.5 * float(resid @ resid)
    return float(scale / rng.gamma(shape))


def _cg_solve(
    operator: LinearOperator,
    rhs: np.ndarray,
    x0: np.ndarray,
    tol: float,
    max_iter: int,
    preconditioner: LinearOperator | None,
) -> tuple[np.ndarray, int]:
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    x, info = cg(
        operator,
        rhs,
        x0=x0,
        rtol=tol,
        atol=0.0,
        maxiter=max_iter,
        M=preconditioner,
        callback=count,
    )
    if info != 0:
        residual = float(np.linalg.norm(rhs - operator @ x) / max(np.linalg.norm(rhs), 1e-300))
        raise CgConvergenceError(
            "conjugate gradients did not converge",
            residual=residual,
            iterations=iterations,
            max_iter=max_iter,
        )
    return x, iterations


def sample_latent_cg(
    state: McmcState,
    data: RegressionData,
    factor: SparseFactor,
    cg_cfg: CgConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw the latent field from N(xi, (Phi + I/sigma2)^-1) by solving one linear system.

    The right-hand side (Y - X beta)/sigma2 + L w1 + w2/sigma has the posterior
    precision as its covariance, so the solution has the posterior law. When the
    solver stalls the same system is retried with a doubled iteration cap.
    """
    n = data.n
    sigma2 = state.sigma2
    w1, w2 = rng.standard_normal(n), rng.standard_normal(n)
    residual = (data.Y - data.X @ state.beta) / sigma2
    rhs = residual + apply_sqrt_factor(factor, w1) + w2 / math.sqrt(sigma2)

    operator = LinearOperator(
        (n, n), matvec=lambda x: apply_precision(factor, x) + x / sigma2, dtype=float
    )
    preconditioner = None
    if cg_cfg.preconditioner == "jacobi":
        diag = precision_diagonal(factor) + 1.0 / sigma2
        preconditioner = LinearOperator((n, n), matvec=lambda x: x / diag, dtype=float)

    x0 = state.z if state.z is not None and len(state.z) == n else np.zeros(n)
    max_iter = cg_cfg.max_iter or 10 * n
    for attempt in Retrying(
        stop=stop_after_attempt(cg_cfg.retries + 1),
        retry=retry_if_exception_type(CgConvergenceError),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    ):
        with attempt:
            cap = max_iter * 2 ** (attempt.retry_state.attempt_number - 1)
            z, iterations = _cg_solve(operator, rhs, x0, cg_cfg.tol, cap, preconditioner)
    state.cg_iterations.append(iterations)
    return z


def loglik_latent_given_theta(
    z: ArrayLike,
    dag: RadialDag,
    k: KernelSpec,
    jitter: float = 0.0,
    threads: int = 1,
) -> float:
    """Sum of the n conditional normal log densities of `z` under the factor for `k`."""
    return log_density(build_sparse_factor(dag, k, jitter=jitter, threads=threads), z)


def _metropolis(
    values: dict[str, float],
    names: list[str],
    log_target: Callable[[dict[str, float]], tuple[float, Any]],
    current_target: float,
    priors: dict[str, _Prior],
    mh: RobustAdaptiveMetropolis,
    rng: np.random.Generator,
    proposal: dict[str, float] | None = None,
) -> tuple[dict[str, float], bool, Any]:
    """One random-walk step on the log of `names`; returns the payload of the accepted target."""
    if proposal is None:
        step = mh.propose(rng)
        candidate = {**values, **{n: values[n] * math.exp(s) for n, s in zip(names, step)}}
    else:
        candidate = {**values, **proposal}

    def log_prior(v: dict[str, float]) -> float:
        return sum(
            priors[n].log_density(v[n]) + math.log(v[n]) if v[n] > 0 else -math.inf for n in names
        )

    prior_new = log_prior(candidate)
    if not math.isfinite(prior_new):
        mh.support_rejections += 1
        mh.record(False, 0.0)
        return values, False, None
    try:
        target_new, payload = log_target(candidate)
    except FactorizationError as err:
        logger.warning(f"proposal rejected: {err}")
        mh.record(False, 0.0)
        return values, False, None

    log_ratio = target_new + prior_new - current_target - log_prior(values)
    accept_prob = math.exp(min(0.0, log_ratio)) if not math.isnan(log_ratio) else 0.0
    accepted = bool(rng.uniform() < accept_prob)
    mh.record(accepted, accept_prob)
    return (candidate if accepted else values), accepted, payload if accepted else None


def sampled_theta(prior: PriorSpec, theta: dict[str, float]) -> list[str]:
    """Kernel parameters that carry a prior (the others stay fixed)."""
    return [n for n in theta if n in prior.theta]


def mh_step_theta(
    state: McmcState,
    z: ArrayLike,
    dag: RadialDag,
    prior: PriorSpec,
    rng: np.random.Generator,
    proposal: dict[str, float] | None = None,
    threads: int = 1,
) -> tuple[dict[str, float], bool]:
    """Metropolis update of the covariance parameters given the latent field.

    Rejections caused by leaving the prior support are counted on `state.mh`.
    """
    names = sampled_theta(prior, state.theta)
    if not names:
        return state.theta, False
    z = np.asarray(z, dtype=float)
    if state.factor is None:
        state.factor = build_sparse_factor(dag, state.kernel, jitter=state.jitter, threads=threads)

    def target(values: dict[str, float]) -> tuple[float, SparseFactor]:
        spec = KernelSpec(family=state.family, params=values)
        f = build_sparse_factor(dag, spec, jitter=state.jitter, threads=threads)
        return log_density(f, z), f

    theta, accepted, factor = _metropolis(
        state.theta,
        names,
        target,
        log_density(state.factor, z),
        prior.theta,
        state.mh,
        rng,
        proposal,
    )
    if accepted:
        state.theta, state.factor = theta, factor
    return state.theta, accepted


def variogram_initial_theta(
    data: RegressionData,
    k: KernelSpec,
    prior: PriorSpec,
    rng: np.random.Generator,
    max_points: int = 500,
) -> dict[str, float]:
    """Method-of-moments start: total variance and a range fitted at two lags."""
    kernel = make_kernel(k)
    theta = dict(k.params)
    resid = data.Y
    if data.p:
        coef, *_ = np.linalg.lstsq(data.X, data.Y, rcond=None)
        resid = data.Y - data.X @ coef
    total = float(np.var(resid))
    if data.n < 3 or total <= 0:
        return theta

    keep = rng.choice(data.n, size=min(data.n, max_points), replace=False)
    dist = pdist(data.locations.points[keep])
    semi = 0.5 * pdist(resid[keep, None], "sqeuclidean")
    span = dist.max()
    target_corr, lags = [], []
    for h in (0.05 * span, 0.15 * span):
        band = np.abs(dist - h) < 0.25 * h
        if band.any():
            lags.append(h)
            target_corr.append(max(1.0 - float(semi[band].mean()) / total, 1e-3))
    variance_name = kernel.variance_name
    if variance_name in prior.theta:
        theta[variance_name] = _clamp(total, prior.theta[variance_name])
    range_name = kernel.range_name
    if not lags or range_name not in prior.theta:
        return theta

    lags_arr, corr_arr = np.asarray(lags), np.asarray(target_corr)

    def loss(log_range: float) -> float:
        fitted = kernel.with_params(**{range_name: math.exp(log_range)}).correlation(lags_arr)
        return float(np.sum((fitted - corr_arr) ** 2))

    bounds = prior.theta[range_name]
    lo = math.log(max(bounds.lower, 1e-6))
    hi = math.log(bounds.upper) if math.isfinite(bounds.upper) else lo + 20.0
    fit = minimize_scalar(loss, bounds=(lo, hi), method="bounded")
    theta[range_name] = _clamp(math.exp(fit.x), bounds)
    logger.info(
        f"variogram start: {variance_name}={theta[variance_name]:.4g}, "
        f"{range_name}={theta[range_name]:.4g}"
    )
    return theta


def _clamp(value: float, prior: ThetaPrior) -> float:
    return float(min(max(value, prior.lower), prior.upper))


def _initial_state(
    data: RegressionData,
    prior: PriorSpec,
    kernel: KernelSpec,
    theta0: dict[str, float] | None,
    n_moving: int,
    mh_cfg: MhConfig,
    rng: np.random.Generator,
    jitter: float,
) -> McmcState:
    theta = dict(kernel.params)
    if theta0 is not None:
        theta.update(theta0)
    else:
        theta = variogram_initial_theta(data, kernel, prior, rng)
    for name in sampled_theta(prior, theta):
        if not prior.theta[name].in_support(theta[name]):
            raise InferenceError(
                "initial value outside prior support", parameter=name, value=theta[name]
            )
    return McmcState(
        beta=np.zeros(data.p),
        sigma2=prior.sigma2.mean,
        theta=theta,
        family=kernel.family,
        mh=RobustAdaptiveMetropolis(n_moving, mh_cfg),
        jitter=jitter,
    )


def _is_retained(it: int, l2: int, thin: int) -> bool:
    return it >= l2 and (it - l2) % thin == 0


def _record(state: McmcState, it: int, retained: bool) -> dict[str, Any]:
    row: dict[str, Any] = {"iteration": it, "retained": retained}
    row.update({f"beta_{j}": float(b) for j, b in enumerate(state.beta)})
    row["sigma2"] = state.sigma2
    row.update({f"theta_{k}": float(v) for k, v in state.theta.items()})
    return row


def _check_run(data: RegressionData, rho: float, l1: int, l2: int, thin: int) -> None:
    if not rho > 0:
        raise InferenceError("radius must be positive", rho=rho)
    if l1 < 1 or l2 < 1 or thin < 1:
        raise InferenceError("iteration counts must be positive", l1=l1, l2=l2, thin=thin)
    if data.n == 0:
        raise InferenceError("no training data")


def _run_iterations(l1: int, step: Callable[[int], None]) -> None:
    for it in range(1, l1 + 1):
        try:
            step(it)
        except RadgpError as err:
            err.context.setdefault("iteration", it)
            raise


Predictor = Callable[[McmcState, np.random.Generator], np.ndarray]


def run_latent_mcmc(
    data: RegressionData,
    prior: PriorSpec,
    rho: float,
    l1: int,
    l2: int,
    seed: int = DEFAULT_SEED,
    cg_cfg: CgConfig | None = None,
    kernel: KernelSpec | None = None,
    mh_cfg: MhConfig | None = None,
    theta0: dict[str, float] | None = None,
    thin: int = 1,
    keep_latent: bool = True,
    jitter: float = 0.0,
    threads: int = 1,
    predictor: Predictor | None = None,
    dag: RadialDag | None = None,
) -> PosteriorDraws:
    """Latent-effects Gibbs sampler with conjugate gradient field draws.

    Iterations run 1..l1; iterations l >= l2 (every `thin`-th) are retained, and for
    those `predictor` is called to draw test values from the current state.
    """
    _check_run(data, rho, l1, l2, thin)
    cg_cfg = cg_cfg or CgConfig()
    kernel = kernel or KernelSpec()
    mh_cfg = mh_cfg or MhConfig()
    rng = np.random.default_rng(seed)
    dag = dag or build_dag(partition_locations(data.locations, rho, seed))

    state = _initial_state(
        data, prior, kernel, theta0, len(sampled_theta(prior, kernel.params)), mh_cfg, rng, jitter
    )
    state.z = np.zeros(data.n)
    state.factor = build_sparse_factor(dag, state.kernel, jitter=jitter, threads=threads)

    rows: list[dict[str, Any]] = []
    latent: list[np.ndarray] = []
    predictions: list[np.ndarray] = []

    def step(it: int) -> None:
        state.beta = sample_beta(state, data, prior, rng)
        state.sigma2 = sample_sigma2(state, data, prior, rng)
        state.z = sample_latent_cg(state, data, state.factor, cg_cfg, rng)
        mh_step_theta(state, state.z, dag, prior, rng, threads=threads)
        if it == l2:
            state.mh.freeze()
        retained = _is_retained(it, l2, thin)
        rows.append(_record(state, it, retained))
        if retained:
            if keep_latent:
                latent.append(state.z.copy())
            if predictor is not None:
                predictions.append(predictor(state, rng))

    _run_iterations(l1, step)
    draws = PosteriorDraws(
        model="latent",
        family=kernel.family,
        frame=pd.DataFrame(rows),
        l1=l1,
        l2=l2,
        latent=np.vstack(latent) if latent else None,
        predictions=np.vstack(predictions) if predictions else None,
        acceptance_rate=state.mh.acceptance_rate,
        post_burn_acceptance_rate=state.mh.frozen_acceptance_rate,
        cg_iterations=state.cg_iterations,
        seed=seed,
    )
    logger.info(
        f"latent chain done: acceptance={draws.acceptance_rate:.3f}, "
        f"post burn-in={draws.post_burn_acceptance_rate:.3f}, "
        f"mean CG iterations={np.mean(state.cg_iterations):.1f}, "
        f"support rejections={state.mh.support_rejections}"
    )
    return draws


def response_loglik(
    data: RegressionData,
    beta: np.ndarray,
    sigma2: float,
    k: KernelSpec,
    dag: RadialDag,
    jitter: float = 0.0,
    threads: int = 1,
) -> tuple[float, SparseFactor]:
    """Marginal log likelihood of Y under the factor of K + sigma2 I, and that factor."""
    f = build_sparse_factor(dag, k, jitter=jitter, nugget=sigma2, threads=threads)
    return log_density(f, data.Y - data.X @ beta), f


def sample_beta_response(
    factor: SparseFactor, data: RegressionData, prior: PriorSpec, rng: np.random.Generator
) -> np.ndarray:
    """Draw beta from N((P0 + X'Phi X)^-1 (P0 b0 + X'Phi Y), (P0 + X'Phi X)^-1)."""
    if data.p == 0:
        return np.empty(0)
    mean0, prec0 = prior.beta.arrays(data.p)
    phi_x = apply_precision(factor, data.X)
    precision = prec0 + data.X.T @ phi_x
    rhs = prec0 @ mean0 + phi_x.T @ data.Y
    return _gaussian_draw(0.5 * (precision + precision.T), rhs, rng)


def run_response_mcmc(
    data: RegressionData,
    prior: PriorSpec,
    rho: float,
    l1: int,
    l2: int,
    seed: int = DEFAULT_SEED,
    kernel: KernelSpec | None = None,
    mh_cfg: MhConfig | None = None,
    theta0: dict[str, float] | None = None,
    thin: int = 1,
    jitter: float = 0.0,
    threads: int = 1,
    predictor: Predictor | None = None,
    dag: RadialDag | None = None,
) -> PosteriorDraws:
    """Marginal (response) sampler: conjugate beta, joint adaptive step on (sigma2, theta).

    Adaptation targets the configured acceptance rate and stops after burn-in.
    """
    _check_run(data, rho, l1, l2, thin)
    kernel = kernel or KernelSpec()
    mh_cfg = mh_cfg or MhConfig(adapt=True)
    rng = np.random.default_rng(seed)
    dag = dag or build_dag(partition_locations(data.locations, rho, seed))

    names = ["sigma2", *sampled_theta(prior, kernel.params)]
    state = _initial_state(data, prior, kernel, theta0, len(names), mh_cfg, rng, jitter)
    loglik, state.factor = response_loglik(
        data, state.beta, state.sigma2, state.kernel, dag, jitter, threads
    )
    priors: dict[str, _Prior] = {"sigma2": prior.sigma2, **prior.theta}

    rows: list[dict[str, Any]] = []
    predictions: list[np.ndarray] = []

    def target(values: dict[str, float]) -> tuple[float, SparseFactor]:
        theta = {k: v for k, v in values.items() if k != "sigma2"}
        spec = KernelSpec(family=state.family, params=theta)
        return response_loglik(data, state.beta, values["sigma2"], spec, dag, jitter, threads)

    def step(it: int) -> None:
        state.beta = sample_beta_response(state.factor, data, prior, rng)
        current = {"sigma2": state.sigma2, **state.theta}
        values, accepted, factor = _metropolis(
            current,
            names,
            target,
            log_density(state.factor, data.Y - data.X @ state.beta),
            priors,
            state.mh,
            rng,
        )
        if accepted:
            state.sigma2 = values.pop("sigma2")
            state.theta = values
            state.factor = factor
        if it == l2:
            state.mh.freeze()
        retained = _is_retained(it, l2, thin)
        rows.append(_record(state, it, retained))
        if retained and predictor is not None:
            predictions.append(predictor(state, rng))

    _run_iterations(l1, step)
    draws = PosteriorDraws(
        model="response",
        family=kernel.family,
        frame=pd.DataFrame(rows),
        l1=l1,
        l2=l2,
        predictions=np.vstack(predictions) if predictions else None,
        acceptance_rate=state.mh.acceptance_rate,
        post_burn_acceptance_rate=state.mh.frozen_acceptance_rate,
        seed=seed,
    )
    logger.info(
        f"response chain done: initial loglik={loglik:.4g}, "
        f"acceptance={draws.acceptance_rate:.3f}, "
        f"post burn-in={draws.post_burn_acceptance_rate:.3f}"
    )
    return draws


def chain_seeds(seed: int, chains: int) -> list[int]:
    """Independent per-chain seeds spawned from `seed`."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(chains)]


def run_chains(
    runner: Callable[..., PosteriorDraws],
    chains: int,
    seed: int,
    workers: int = 1,
    **kwargs: Any,
) -> list[PosteriorDraws]:
    """Run `chains` independent chains of `runner`, concurrently when `workers > 1`."""
    if chains < 1:
        raise InferenceError("at least one chain is required", chains=chains)
    seeds = chain_seeds(seed, chains) if chains > 1 else [seed]
    if workers > 1 and chains > 1:
        with ThreadPoolExecutor(max_workers=min(workers, chains)) as pool:
            return list(pool.map(lambda s: runner(seed=s, **kwargs), seeds))
    return [runner(seed=s, **kwargs) for s in seeds]


def combine_chains(draws: list[PosteriorDraws]) -> PosteriorDraws:
    """Stack chains into one set of draws with a `chain` column."""
    if len(draws) == 1:
        return draws[0]
    frames = [d.frame.assign(chain=c) for c, d in enumerate(draws)]

    def stack(attr: str) -> np.ndarray | None:
        parts = [getattr(d, attr) for d in draws]
        return None if any(p is None for p in parts) else np.vstack(parts)

    first = draws[0]
    return PosteriorDraws(
        model=first.model,
        family=first.family,
        frame=pd.concat(frames, ignore_index=True),
        l1=first.l1,
        l2=first.l2,
        latent=stack("latent"),
        predictions=stack("predictions"),
        acceptance_rate=float(np.nanmean([d.acceptance_rate for d in draws])),
        post_burn_acceptance_rate=float(np.nanmean([d.post_burn_acceptance_rate for d in draws])),
        cg_iterations=[i for d in draws for i in d.cg_iterations],
        seed=first.seed,
    )
