"""Desk-scale reproduction runs; selected with `-m slow`."""

import logging

import numpy as np
import pytest

from constants import TRUE_PHI, TRUE_SIGMA, TRUE_TAU
from dag import build_dag
from geometry import LocationSet
from inference import RegressionData, run_latent_mcmc, run_response_mcmc
from kernels import cov_matrix
from metrics import mse_and_coverage, sliced_w2, w2_radius_sweep
from models import KernelSpec, MhConfig, PriorSpec
from partition import partition_locations
from predict import (
    build_prediction_plan,
    exact_predictive_moments,
    latent_predictor,
    sample_test_nodes,
    summarize_predictions,
)
from simulate import simulate_dataset

logger = logging.getLogger(__name__)

pytestmark = pytest.mark.slow

TRUTH = KernelSpec(family="exponential", params={"tau2": TRUE_TAU**2, "phi": TRUE_PHI})
RHO = 0.055


def _scenario(seed, n_train=400, n_test=1000):
    sim = simulate_dataset(TRUTH, n_train, n_test, TRUE_SIGMA, seed=seed)
    train = sim.train
    data = RegressionData.without_covariates(
        LocationSet(train[["x1", "x2"]].to_numpy()), train["y"].to_numpy()
    )
    return data, LocationSet(sim.test[["x1", "x2"]].to_numpy()), sim.truth


def _replicates(n_train):
    """Posterior means of phi and tau2, test MSE and coverage averaged over 3 datasets."""
    phi, tau2, mse, coverage = [], [], [], []
    for seed in (1, 2, 3):
        data, test, truth = _scenario(seed, n_train=n_train)
        dag = build_dag(partition_locations(data.locations, RHO, seed))
        plan = build_prediction_plan(dag, test, seed=seed)
        draws = run_latent_mcmc(
            data,
            PriorSpec(),
            RHO,
            l1=4000,
            l2=2000,
            seed=seed,
            kernel=TRUTH,
            predictor=latent_predictor(plan, noisy=True),
            dag=dag,
        )
        means = draws.posterior_means()
        phi.append(means["theta_phi"])
        tau2.append(means["theta_tau2"])
        scores = mse_and_coverage(truth, summarize_predictions(draws.predictions))
        mse.append(scores[0])
        coverage.append(scores[1])
        logger.info(f"replicate {seed}: {means}, mse={scores[0]:.4g}, coverage={scores[1]:.3f}")
    return np.mean(phi), np.mean(tau2), np.mean(mse), np.mean(coverage)


def test_reduced_grid_reproduction():
    phi, tau2, mse, coverage = _replicates(n_train=400)
    assert 15.0 <= phi <= 26.0
    assert 0.80 <= tau2 <= 1.25
    assert 0.12 <= mse <= 0.35
    assert 0.92 <= coverage <= 0.98


def test_full_grid_reproduction():
    phi, tau2, mse, coverage = _replicates(n_train=1600)
    assert 15.0 <= phi <= 26.0
    assert 0.80 <= tau2 <= 1.25
    assert 0.17 <= mse <= 0.27
    assert 0.92 <= coverage <= 0.98


def test_response_sampler_targets_its_acceptance_rate():
    data, _, _ = _scenario(seed=4)
    draws = run_response_mcmc(
        data,
        PriorSpec(),
        RHO,
        l1=4000,
        l2=2000,
        seed=4,
        kernel=TRUTH,
        mh_cfg=MhConfig(adapt=True),
    )
    assert 0.15 <= draws.post_burn_acceptance_rate <= 0.35


def test_radius_monotonicity(grid):
    locations = grid(12)
    q = 1.0 / 11.0
    diameter = locations.diameter
    rhos = np.linspace(q, 1.01 * diameter, 6)
    sweep = w2_radius_sweep(locations, TRUTH, rhos)
    w2 = sweep["w2_squared"].to_numpy()
    assert w2[-1] <= w2[0]
    assert w2[-1] <= 1e-8 * len(locations) * TRUTH.params["tau2"]


def test_joint_prediction_fidelity(grid, rng):
    train = grid(10)
    test = LocationSet(0.46 + 0.08 * rng.uniform(size=(5, 2)))
    dag = build_dag(partition_locations(train, 3.0 / TRUE_PHI))
    plan = build_prediction_plan(dag, test)
    z = np.linalg.cholesky(cov_matrix(TRUTH, train)) @ rng.standard_normal(len(train))

    n_draws = 20_000
    radgp = np.vstack([sample_test_nodes(plan, TRUTH, z, rng) for _ in range(n_draws)])
    mean, cov = exact_predictive_moments(train.points, test.points, TRUTH, z)
    exact = rng.multivariate_normal(mean, cov, size=n_draws)
    scale = (TRUE_TAU**2 + TRUE_SIGMA**2) ** 0.5
    assert sliced_w2(radgp, exact) <= 0.05 * scale
