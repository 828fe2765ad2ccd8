import math

import numpy as np
import pandas as pd
import pytest

from dag import build_dag
from errors import MetricsError
from kernels import cov_matrix
from metrics import (
    mse_and_coverage,
    region_labels,
    regional_sliced_w2,
    sliced_w2,
    w2_column_bound,
    w2_gaussian,
    w2_radius_sweep,
    w2_report,
    w2_trace_bound,
)
from geometry import LocationSet
from models import KernelSpec
from partition import partition_locations
from precision import build_exact_factor, build_sparse_factor

SANDWICH_KERNELS = [
    KernelSpec(family="exponential", params={"tau2": 1.0, "phi": 10.0}),
    KernelSpec(family="matern", params={"sigma2": 1.0, "alpha": 8.0, "nu": 1.5}),
    KernelSpec(family="gaussian", params={"sigma2": 1.0, "a": 100.0}),
    KernelSpec(
        family="generalized_cauchy", params={"sigma2": 1.0, "alpha": 0.2, "delta": 1.0, "lam": 4.0}
    ),
]


class TestGaussianW2:
    def test_identical_laws(self):
        cov = np.array([[2.0, 0.3], [0.3, 1.0]])
        assert w2_gaussian([1.0, 2.0], cov, [1.0, 2.0], cov) == pytest.approx(0.0, abs=1e-12)

    def test_scalar_variances(self):
        assert w2_gaussian([0.0], [[1.0]], [0.0], [[4.0]]) == pytest.approx(1.0)

    def test_mean_shift_and_diagonal_covariances(self):
        assert w2_gaussian([0, 0], np.eye(2), [1, 2], np.eye(2)) == pytest.approx(5.0)
        value = w2_gaussian([0, 0], np.diag([1.0, 4.0]), [1, 2], np.diag([4.0, 9.0]))
        assert value == pytest.approx(7.0)

    def test_symmetric_in_its_arguments(self, rng):
        a = rng.standard_normal((4, 4))
        b = rng.standard_normal((4, 4))
        cov_a, cov_b = a @ a.T + 0.1 * np.eye(4), b @ b.T + 0.1 * np.eye(4)
        m = rng.standard_normal(4)
        forward = w2_gaussian(m, cov_a, np.zeros(4), cov_b)
        assert forward == pytest.approx(w2_gaussian(np.zeros(4), cov_b, m, cov_a), rel=1e-8)

    def test_bounded_by_trace_distance(self, rng):
        for _ in range(10):
            a = rng.standard_normal((5, 5))
            b = rng.standard_normal((5, 5))
            cov_a, cov_b = a @ a.T, b @ b.T
            zeros = np.zeros(5)
            assert w2_gaussian(zeros, cov_a, zeros, cov_b) <= w2_trace_bound(cov_a, cov_b) + 1e-9

    @pytest.mark.parametrize(
        "cov,message",
        [
            (np.ones((2, 3)), "square"),
            (np.array([[1.0, 0.5], [0.0, 1.0]]), "symmetric"),
            (np.array([[1.0, 2.0], [2.0, 1.0]]), "semidefinite"),
        ],
    )
    def test_invalid_covariances(self, cov, message):
        with pytest.raises(MetricsError, match=message):
            w2_gaussian(np.zeros(2), cov, np.zeros(2), np.eye(2))

    def test_dimension_mismatch(self):
        with pytest.raises(MetricsError, match="dimension mismatch"):
            w2_gaussian(np.zeros(2), np.eye(2), np.zeros(3), np.eye(3))


def test_trace_bound():
    assert w2_trace_bound(np.diag([1.0, 4.0]), np.diag([4.0, 12.0])) == pytest.approx(11.0)
    with pytest.raises(MetricsError):
        w2_trace_bound(np.eye(2), np.eye(3))


class TestFactorDiagnostics:
    def test_column_bound_vanishes_for_identical_factors(self, uniform, exp_kernel):
        locations = uniform(20, seed=2)
        factor = build_exact_factor(locations, exp_kernel)
        cov = cov_matrix(exp_kernel, locations)
        assert w2_column_bound(factor, factor, cov) == pytest.approx(0.0)

    def test_column_bound_needs_matching_orders(self, uniform, exp_kernel):
        locations = uniform(10, seed=2)
        a = build_exact_factor(locations, exp_kernel)
        b = build_exact_factor(locations, exp_kernel, order=np.arange(10)[::-1])
        with pytest.raises(MetricsError, match="orderings"):
            w2_column_bound(a, b, np.eye(10))

    def test_report_orders_its_quantities(self, uniform, exp_kernel):
        locations = uniform(40, seed=6)
        dag = build_dag(partition_locations(locations, 0.2))
        exact = build_exact_factor(locations, exp_kernel, order=dag.order)
        report = w2_report(exact, build_sparse_factor(dag, exp_kernel))
        assert 0.0 <= report.w2_squared <= report.trace_bound + 1e-9
        assert report.hypothesis_met == (report.column_bound is not None)
        if report.column_bound is not None:
            assert report.trace_bound <= report.column_bound + 1e-9
        assert len(report.inputs_hash) == 64

    @pytest.mark.parametrize("seed", range(30))
    def test_bounds_sandwich_the_distance(self, seed):
        rng = np.random.default_rng(1000 + seed)
        n = int(rng.integers(10, 101))
        rho = float(rng.uniform(0.05, 0.5))
        k = SANDWICH_KERNELS[seed % len(SANDWICH_KERNELS)]
        locations = LocationSet(rng.uniform(size=(n, 2)))
        dag = build_dag(partition_locations(locations, rho, seed=seed))
        exact = build_exact_factor(locations, k, order=dag.order)
        report = w2_report(exact, build_sparse_factor(dag, k))
        assert report.w2_squared <= report.trace_bound + 1e-10
        if report.hypothesis_met:
            assert report.trace_bound <= report.column_bound + 1e-8

    def test_radius_sweep(self, uniform, exp_kernel):
        locations = uniform(30, seed=4)
        sweep = w2_radius_sweep(locations, exp_kernel, [2.0, 0.1, 0.3])
        assert sweep["rho"].tolist() == [0.1, 0.3, 2.0]
        assert {"n_subsets", "max_parents", "w2_squared", "trace_bound"} <= set(sweep.columns)
        assert sweep["max_parents"].iloc[-1] == 29
        # a radius past the diameter reproduces the exact law
        assert sweep["w2_squared"].iloc[-1] == pytest.approx(0.0, abs=1e-6)
        assert sweep["trace_bound"].iloc[-1] == pytest.approx(0.0, abs=1e-6)
        assert sweep["w2_squared"].iloc[0] > sweep["w2_squared"].iloc[-1]


class TestSlicedW2:
    def test_one_dimensional_shift_is_exact(self):
        a = np.arange(50.0)
        assert sliced_w2(a, a + 3.0, n_projections=5) == pytest.approx(3.0)

    def test_two_dimensional_shift(self, rng):
        a = rng.standard_normal((500, 2))
        value = sliced_w2(a, a + [2.0, 0.0], n_projections=2000)
        assert value == pytest.approx(math.sqrt(2.0), rel=0.05)

    def test_same_samples(self, rng):
        a = rng.standard_normal((30, 3))
        assert sliced_w2(a, a[::-1]) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize(
        "a,b,message",
        [
            (np.empty((0, 2)), np.empty((0, 2)), "empty"),
            (np.zeros((3, 2)), np.zeros((3, 3)), "dimension"),
            (np.zeros((3, 2)), np.zeros((4, 2)), "counts"),
        ],
    )
    def test_invalid_inputs(self, a, b, message):
        with pytest.raises(MetricsError, match=message):
            sliced_w2(a, b)

    def test_needs_a_projection(self):
        with pytest.raises(MetricsError):
            sliced_w2(np.zeros(3), np.zeros(3), n_projections=0)


def test_region_labels():
    points = [[0.2, 0.2], [0.5, 0.8], [0.3, 0.3], [0.85, 0.45]]
    labels = region_labels(points)
    assert labels.tolist() == [
        "x0.15-0.25_y0.15-0.25",
        "x0.45-0.55_y0.75-0.85",
        "",
        "x0.75-0.85_y0.45-0.55",
    ]


def test_regional_sliced_w2(rng):
    points = np.array([[0.2, 0.2], [0.21, 0.19], [0.5, 0.5], [0.9, 0.9]])
    draws = rng.standard_normal((100, 4))
    frame = regional_sliced_w2(points, draws, draws + 1.0, method="radgp", n_projections=50)
    assert frame.columns.tolist() == ["region", "method", "value", "n_locations"]
    assert frame["region"].tolist() == ["x0.15-0.25_y0.15-0.25", "x0.45-0.55_y0.45-0.55"]
    assert frame["n_locations"].tolist() == [2, 1]
    assert frame["value"].iloc[1] == pytest.approx(1.0)


class TestMseAndCoverage:
    @pytest.fixture
    def summaries(self):
        return pd.DataFrame(
            {
                "location_index": [0, 1],
                "post_mean": [1.0, 2.0],
                "post_sd": [0.5, 0.1],
                "q025": [0.0, 2.5],
                "q975": [2.0, 3.0],
            }
        )

    def test_array_truth(self, summaries):
        mse, coverage = mse_and_coverage([1.5, 2.0], summaries)
        assert mse == pytest.approx(0.125)
        assert coverage == 0.5

    def test_frame_truth_is_joined_on_location(self, summaries):
        truth = pd.DataFrame({"location_index": [1, 0], "value": [2.0, 1.5]})
        assert mse_and_coverage(truth, summaries) == pytest.approx((0.125, 0.5))

    def test_misaligned_truth(self, summaries):
        with pytest.raises(MetricsError, match="misaligned"):
            mse_and_coverage([1.0, 2.0, 3.0], summaries)
        truth = pd.DataFrame({"location_index": [0, 5], "value": [1.0, 2.0]})
        with pytest.raises(MetricsError, match="misaligned"):
            mse_and_coverage(truth, summaries)

    def test_missing_columns(self, summaries):
        with pytest.raises(MetricsError, match="columns missing"):
            mse_and_coverage([1.0, 2.0], summaries.drop(columns=["q975"]))

    def test_nothing_to_score(self, summaries):
        with pytest.raises(MetricsError, match="no predictions"):
            mse_and_coverage([], summaries.iloc[:0])
