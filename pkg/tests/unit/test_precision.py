import logging
import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from dag import build_dag
from errors import DiagnosticCapError, FactorizationError, PrecisionError
from geometry import LocationSet
from kernels import cov_matrix, kernel_value, make_kernel
from models import KernelSpec
from partition import partition_locations
from precision import (
    _solve_group,
    _solve_row,
    apply_precision,
    apply_sqrt_factor,
    build_exact_factor,
    build_sparse_factor,
    dense_precision,
    dense_radgp_covariance,
    finite_dimensional_covariance,
    log_density,
    parent_geometry,
    precision_diagonal,
    sqrt_factor_dense,
)
from predict import build_prediction_plan

WELL_CONDITIONED = [
    KernelSpec(family="exponential", params={"tau2": 1.5, "phi": 6.0}),
    KernelSpec(family="matern", params={"sigma2": 1.0, "alpha": 8.0, "nu": 1.5}),
    KernelSpec(family="gaussian", params={"sigma2": 1.0, "a": 400.0}),
    KernelSpec(
        family="generalized_cauchy", params={"sigma2": 1.0, "alpha": 0.2, "delta": 1.0, "lam": 4.0}
    ),
]


def _dag(locations, rho, seed=0):
    return build_dag(partition_locations(locations, rho, seed=seed))


def _relative(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.fixture
def pair(exp_kernel):
    r = 0.1
    locations = LocationSet([[0.0, 0.0], [r, 0.0]])
    factor = build_sparse_factor(_dag(locations, 1.0), exp_kernel)
    v, c = 1.0, math.exp(-19.97 * r)
    return factor, v, c


def test_single_node(exp_kernel):
    factor = build_sparse_factor(_dag(LocationSet([[0.4, 0.4]]), 0.2), exp_kernel)
    assert factor.B_hat.nnz == 0
    np.testing.assert_allclose(factor.D_hat, [1.0])
    np.testing.assert_allclose(dense_radgp_covariance(factor), [[1.0]])
    np.testing.assert_allclose(apply_sqrt_factor(factor, [2.0]), [2.0])


def test_two_nodes(pair):
    factor, v, c = pair
    assert factor.B_hat[1, 0] == pytest.approx(c / v)
    np.testing.assert_allclose(factor.D_hat, [v, v - c * c / v])
    np.testing.assert_allclose(dense_radgp_covariance(factor), [[v, c], [c, v]], atol=1e-14)


def test_two_node_precision_product(pair):
    factor, v, c = pair
    d2 = v - c * c / v
    x = factor.to_locations(np.array([0.0, 1.0]))
    result = factor.to_positions(apply_precision(factor, x))
    np.testing.assert_allclose(result, [-(c / v) / d2, 1.0 / d2])
    np.testing.assert_array_equal(apply_precision(factor, np.zeros(2)), np.zeros(2))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("k", WELL_CONDITIONED, ids=lambda k: k.family)
def test_large_radius_recovers_exact_inverse(uniform, k, seed):
    n = int(np.random.default_rng(seed).integers(20, 201))
    locations = uniform(n, seed=100 + seed)
    factor = build_sparse_factor(_dag(locations, rho=2.0, seed=seed), k)
    sigma = cov_matrix(k, locations)
    product = dense_precision(factor) @ sigma
    assert np.linalg.norm(product - np.eye(n)) / math.sqrt(n) <= 1e-8
    assert _relative(dense_radgp_covariance(factor), sigma) <= 1e-8


@pytest.mark.parametrize("k", WELL_CONDITIONED, ids=lambda k: k.family)
def test_exact_factor_inverts_covariance(uniform, k):
    locations = uniform(40, seed=9)
    factor = build_exact_factor(locations, k)
    product = dense_precision(factor) @ cov_matrix(k, locations)
    assert np.linalg.norm(product - np.eye(40)) / math.sqrt(40) <= 1e-8


def test_exact_factor_matches_sparse_on_mutual_neighbors(pair, exp_kernel):
    factor, _, _ = pair
    locations = LocationSet([[0.0, 0.0], [0.1, 0.0]])
    exact = build_exact_factor(locations, exp_kernel, order=factor.order)
    np.testing.assert_allclose(exact.B_hat.toarray(), factor.B_hat.toarray(), atol=1e-14)
    np.testing.assert_allclose(exact.D_hat, factor.D_hat)


def test_products_match_dense_assembly(uniform, exp_kernel, rng):
    factor = build_sparse_factor(_dag(uniform(60, seed=2), rho=0.2), exp_kernel)
    phi = dense_precision(factor)
    x = rng.standard_normal(60)
    np.testing.assert_allclose(apply_precision(factor, x), phi @ x, rtol=1e-10, atol=1e-10)

    stack = rng.standard_normal((60, 3))
    np.testing.assert_allclose(apply_precision(factor, stack), phi @ stack, rtol=1e-10, atol=1e-10)

    root = apply_sqrt_factor(factor, np.eye(60))
    np.testing.assert_allclose(root @ root.T, phi, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(precision_diagonal(factor), np.diag(phi), rtol=1e-12)

    L = sqrt_factor_dense(factor)
    position = factor.position
    np.testing.assert_allclose((L @ L.T)[np.ix_(position, position)], phi, atol=1e-10)


def test_precision_is_sparse_and_factor_triangular(grid, exp_kernel):
    dag = _dag(grid(8), rho=0.2)
    factor = build_sparse_factor(dag, exp_kernel)
    rows, cols = factor.B_hat.nonzero()
    assert np.all(cols < rows)
    assert factor.B_hat.nnz == len(dag.indices)


def test_log_density(exp_kernel, uniform, rng):
    single = build_sparse_factor(_dag(LocationSet([[0.1, 0.1]]), 0.3), exp_kernel)
    assert log_density(single, [0.0]) == pytest.approx(-0.5 * math.log(2 * math.pi))

    locations = uniform(25, seed=3)
    factor = build_sparse_factor(_dag(locations, rho=2.0), exp_kernel)
    z = rng.standard_normal(25)
    dense = multivariate_normal(np.zeros(25), cov_matrix(exp_kernel, locations)).logpdf(z)
    assert log_density(factor, z) == pytest.approx(dense, abs=1e-6)

    base = log_density(factor, np.zeros(25))
    quad = log_density(factor, z) - base
    assert log_density(factor, 2 * z) - base == pytest.approx(4 * quad, rel=1e-12)


def test_dimension_mismatch(pair):
    factor, _, _ = pair
    with pytest.raises(PrecisionError, match="dimension mismatch"):
        apply_precision(factor, np.zeros(3))


def test_dense_helpers_respect_cap(pair, uniform, exp_kernel):
    factor, _, _ = pair
    with pytest.raises(DiagnosticCapError):
        dense_precision(factor, cap=1)
    with pytest.raises(DiagnosticCapError):
        build_exact_factor(uniform(5), exp_kernel, cap=4)


def test_singular_block_raises_with_row_and_eigenvalue():
    block = np.ones((2, 2))
    with pytest.raises(FactorizationError) as err:
        _solve_row(block, np.ones(2), 1.0, row=7, jitter=0.0)
    assert err.value.context["row"] == 7
    assert err.value.context["min_eigenvalue"] == pytest.approx(0.0, abs=1e-12)


def test_jitter_retry_recovers(caplog):
    with caplog.at_level(logging.WARNING):
        coef, cond = _solve_row(np.ones((2, 2)), np.ones(2), 1.0, row=3, jitter=1e-6)
    assert cond > 0
    np.testing.assert_allclose(coef, [0.5, 0.5], rtol=1e-5)
    assert "row 3" in caplog.text


def test_batched_failure_falls_back_to_row_solves(mocker, uniform, exp_kernel):
    dag = _dag(uniform(50, seed=4), rho=0.3)
    reference = build_sparse_factor(dag, exp_kernel)
    mocker.patch("numpy.linalg.cholesky", side_effect=np.linalg.LinAlgError("forced"))
    fallback = build_sparse_factor(dag, exp_kernel)
    np.testing.assert_allclose(fallback.B_hat.toarray(), reference.B_hat.toarray(), atol=1e-10)
    np.testing.assert_allclose(fallback.D_hat, reference.D_hat, rtol=1e-10)


def test_batched_solves_match_row_solves(any_kernel, rng):
    kernel = make_kernel(any_kernel)
    points = rng.uniform(size=(6, 4, 2))
    children = rng.uniform(size=(6, 2))
    d_pp = np.linalg.norm(points[:, :, None] - points[:, None], axis=-1)
    d_pc = np.linalg.norm(points - children[:, None], axis=-1)
    rows = np.arange(10, 16)
    coef, cond = _solve_group(kernel, rows, d_pp, d_pc, nugget=0.05, jitter=0.0)
    for j in range(6):
        block = kernel(d_pp[j]) + 0.05 * np.eye(4)
        row_coef, row_cond = _solve_row(block, kernel(d_pc[j]), kernel.variance + 0.05, j, 0.0)
        np.testing.assert_allclose(coef[j], row_coef, rtol=1e-9, atol=1e-12)
        assert cond[j] == pytest.approx(row_cond, rel=1e-9)


def test_threads_and_jitter_arguments(uniform, exp_kernel):
    dag = _dag(uniform(80, seed=1), rho=0.25)
    serial = build_sparse_factor(dag, exp_kernel)
    threaded = build_sparse_factor(dag, exp_kernel, threads=4)
    np.testing.assert_allclose(threaded.B_hat.toarray(), serial.B_hat.toarray())
    np.testing.assert_allclose(threaded.D_hat, serial.D_hat)
    with pytest.raises(PrecisionError):
        build_sparse_factor(dag, exp_kernel, jitter=-1.0)


def test_geometry_is_cached_per_graph(grid):
    dag = _dag(grid(5), rho=0.3)
    assert parent_geometry(dag) is parent_geometry(dag)


def test_nugget_factor_targets_response_covariance(uniform, exp_kernel):
    locations = uniform(20, seed=8)
    factor = build_sparse_factor(_dag(locations, rho=2.0), exp_kernel, nugget=0.3)
    expected = cov_matrix(exp_kernel, locations, nugget=0.3)
    assert _relative(dense_radgp_covariance(factor), expected) <= 1e-10


def test_frames(pair):
    factor, _, _ = pair
    b, d = factor.to_frames()
    assert b.columns.tolist() == ["row", "col", "value"]
    assert d.columns.tolist() == ["row", "d_value"]
    assert b[["row", "col"]].values.tolist() == [[1, 0]]


class TestFiniteDimensionalCovariance:
    @pytest.fixture
    def plan(self, uniform):
        train = uniform(30, seed=12)
        test = LocationSet(np.random.default_rng(13).uniform(size=(10, 2)))
        return build_prediction_plan(_dag(train, rho=0.3), test, seed=1)

    def test_full_graph_matches_dense_covariance(self, plan, exp_kernel):
        dag = plan.dag
        cov = finite_dimensional_covariance(dag, exp_kernel, in_graph=np.arange(dag.n))
        dense = dense_radgp_covariance(build_sparse_factor(dag, exp_kernel))
        np.testing.assert_allclose(cov, dense, atol=1e-10)

    def test_marginalizing_an_added_location(self, plan, exp_kernel):
        dag = plan.dag
        rng = np.random.default_rng(0)
        for _ in range(20):
            chosen = rng.choice(dag.n, size=6, replace=False)
            A, x = chosen[:5], chosen[5:]
            direct = finite_dimensional_covariance(dag, exp_kernel, in_graph=A)
            joint = finite_dimensional_covariance(dag, exp_kernel, in_graph=np.r_[A, x])
            np.testing.assert_allclose(joint[:5, :5], direct, atol=1e-8)

            outside = rng.uniform(size=(1, 2))
            joint = finite_dimensional_covariance(dag, exp_kernel, in_graph=A, new_points=outside)
            np.testing.assert_allclose(joint[:5, :5], direct, atol=1e-8)

    def test_isolated_new_point(self, plan, exp_kernel):
        far = np.array([[5.0, 5.0]])
        cov = finite_dimensional_covariance(plan.dag, exp_kernel, in_graph=[0], new_points=far)
        assert cov[1, 1] == pytest.approx(kernel_value(exp_kernel, 0.0))
        assert cov[0, 1] == pytest.approx(0.0)

    def test_new_point_on_training_location(self, plan, exp_kernel):
        with pytest.raises(PrecisionError):
            finite_dimensional_covariance(plan.dag, exp_kernel, new_points=plan.train_points[:1])
