"""Approximation and predictive diagnostics."""

import hashlib
import itertools
import logging
from collections.abc import Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike

from constants import (
    DEFAULT_DIAGNOSTIC_CAP,
    DEFAULT_N_PROJECTIONS,
    DEFAULT_SEED,
    EIGEN_CLAMP,
    REGION_EDGES,
    SYMMETRY_TOL,
)
from dag import build_dag
from errors import MetricsError
from geometry import LocationSet
from models import KernelSpec, W2Report
from partition import partition_locations
from precision import (
    SparseFactor,
    build_exact_factor,
    build_sparse_factor,
    dense_radgp_covariance,
    sqrt_factor_dense,
)
from predict import quantile_names

logger = logging.getLogger(__name__)


def _check_cov(cov: ArrayLike, name: str) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise MetricsError("covariance must be square", name=name, shape=cov.shape)
    scale = max(float(np.max(np.abs(cov))), 1.0) if cov.size else 1.0
    if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL * scale:
        raise MetricsError("covariance is not symmetric", name=name)
    return 0.5 * (cov + cov.T)


def _psd_eigvals(matrix: np.ndarray, name: str) -> np.ndarray:
    w = np.linalg.eigvalsh(matrix)
    top = max(float(np.max(np.abs(w), initial=0.0)), 1e-300)
    if w.size and w.min() < -SYMMETRY_TOL * top:
        raise MetricsError(
            "covariance is not positive semidefinite", name=name, min_eigenvalue=float(w.min())
        )
    return np.where(w > EIGEN_CLAMP * top, w, 0.0)


def _sqrt_psd(cov: np.ndarray, name: str) -> np.ndarray:
    w, v = np.linalg.eigh(cov)
    top = max(float(np.max(np.abs(w), initial=0.0)), 1e-300)
    if w.size and w.min() < -SYMMETRY_TOL * top:
        raise MetricsError(
            "covariance is not positive semidefinite", name=name, min_eigenvalue=float(w.min())
        )
    w = np.where(w > EIGEN_CLAMP * top, w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def w2_gaussian(mean1: ArrayLike, cov1: ArrayLike, mean2: ArrayLike, cov2: ArrayLike) -> float:
    """Squared 2-Wasserstein distance between two Gaussians."""
    c1, c2 = _check_cov(cov1, "cov1"), _check_cov(cov2, "cov2")
    m1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    m2 = np.atleast_1d(np.asarray(mean2, dtype=float))
    if c1.shape != c2.shape or m1.shape != m2.shape or m1.shape[0] != c1.shape[0]:
        raise MetricsError("dimension mismatch", cov1=c1.shape, cov2=c2.shape)
    root = _sqrt_psd(c1, "cov1")
    _psd_eigvals(c2, "cov2")
    cross = _psd_eigvals(0.5 * ((root @ c2 @ root) + (root @ c2 @ root).T), "cross")
    trace = np.trace(c1) + np.trace(c2) - 2.0 * np.sum(np.sqrt(cross))
    value = float(np.sum((m1 - m2) ** 2) + trace)
    return max(value, 0.0)


def w2_trace_bound(cov1: ArrayLike, cov2: ArrayLike) -> float:
    """Trace norm of cov1 - cov2."""
    c1 = np.atleast_2d(np.asarray(cov1, dtype=float))
    c2 = np.atleast_2d(np.asarray(cov2, dtype=float))
    if c1.shape != c2.shape:
        raise MetricsError("dimension mismatch", cov1=c1.shape, cov2=c2.shape)
    return float(np.sum(np.linalg.svd(c1 - c2, compute_uv=False)))


def w2_column_bound(
    exact: SparseFactor,
    approx: SparseFactor,
    cov: ArrayLike,
    cap: int = DEFAULT_DIAGNOSTIC_CAP,
) -> float | None:
    """Column-norm bound on the trace distance, or None when its hypothesis fails.

    The hypothesis is |L_hat - L|_2 <= |Sigma|_2^-1/2 / 2 for the precision factors
    L = (I - B^T) D^-1/2.
    """
    if not np.array_equal(exact.order, approx.order):
        raise MetricsError("factors use different orderings")
    L = sqrt_factor_dense(exact, cap)
    L_hat = sqrt_factor_dense(approx, cap)
    sigma_norm = float(np.linalg.norm(np.asarray(cov, dtype=float), 2))
    diff = L_hat - L
    if np.linalg.norm(diff, 2) > 0.5 / np.sqrt(sigma_norm):
        return None
    col = float(np.max(np.linalg.norm(L, axis=0)))
    col_diff = float(np.max(np.linalg.norm(diff, axis=0)))
    n = exact.n
    return 8.0 * n * sigma_norm**2 * (2.0 * col * col_diff + col_diff**2)


def _hash(*arrays: np.ndarray) -> str:
    digest = hashlib.sha256()
    for a in arrays:
        digest.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return digest.hexdigest()


def w2_report(
    exact: SparseFactor, approx: SparseFactor, cap: int = DEFAULT_DIAGNOSTIC_CAP
) -> W2Report:
    """Exact W2 between the zero-mean Gaussians of two factors, with both bounds."""
    cov = dense_radgp_covariance(exact, cap)
    cov_hat = dense_radgp_covariance(approx, cap)
    zeros = np.zeros(exact.n)
    column = w2_column_bound(exact, approx, cov, cap)
    return W2Report(
        w2_squared=w2_gaussian(zeros, cov, zeros, cov_hat),
        trace_bound=w2_trace_bound(cov, cov_hat),
        column_bound=column,
        hypothesis_met=column is not None,
        inputs_hash=_hash(cov, cov_hat),
    )


def w2_radius_sweep(
    locations: LocationSet,
    k: KernelSpec,
    rhos: Sequence[float],
    seed: int = DEFAULT_SEED,
    cap: int = DEFAULT_DIAGNOSTIC_CAP,
) -> pd.DataFrame:
    """W2 report of the radial neighbors approximation for each radius."""
    rows = []
    for rho in sorted(rhos):
        dag = build_dag(partition_locations(locations, rho, seed))
        exact = build_exact_factor(locations, k, order=dag.order, cap=cap)
        report = w2_report(exact, build_sparse_factor(dag, k), cap)
        rows.append(
            {
                "rho": float(rho),
                "n_subsets": dag.partition.n_subsets,
                "max_parents": int(dag.n_parents.max()) if dag.n else 0,
                **report.model_dump(),
            }
        )
        logger.info(
            f"rho={rho:.4g}: W2^2={report.w2_squared:.4g}, trace bound={report.trace_bound:.4g}"
        )
    return pd.DataFrame(rows)


def sliced_w2(
    samples_a: ArrayLike,
    samples_b: ArrayLike,
    n_projections: int = DEFAULT_N_PROJECTIONS,
    seed: int = DEFAULT_SEED,
) -> float:
    """Monte Carlo sliced 2-Wasserstein distance between two equal-size sample sets."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise MetricsError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise MetricsError("dimension mismatch", a=a.shape[1], b=b.shape[1])
    if a.shape[0] != b.shape[0]:
        raise MetricsError("sample counts differ", a=a.shape[0], b=b.shape[0])
    if n_projections < 1:
        raise MetricsError("at least one projection is required", n_projections=n_projections)
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((n_projections, a.shape[1]))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    proj_a = np.sort(a @ directions.T, axis=0)
    proj_b = np.sort(b @ directions.T, axis=0)
    return float(np.sqrt(np.mean((proj_a - proj_b) ** 2)))


def region_labels(
    points: ArrayLike, edges: Sequence[tuple[float, float]] = REGION_EDGES
) -> np.ndarray:
    """Label of the square region each 2-D point falls in (`""` outside every region)."""
    points = np.asarray(points, dtype=float)
    labels = np.full(len(points), "", dtype=object)
    for (x0, x1), (y0, y1) in itertools.product(edges, repeat=2):
        in_x = (points[:, 0] >= x0) & (points[:, 0] <= x1)
        inside = in_x & (points[:, 1] >= y0) & (points[:, 1] <= y1)
        labels[inside] = f"x{x0:g}-{x1:g}_y{y0:g}-{y1:g}"
    return labels


def regional_sliced_w2(
    test_points: ArrayLike,
    draws: np.ndarray,
    reference: np.ndarray,
    method: str,
    n_projections: int = DEFAULT_N_PROJECTIONS,
    seed: int = DEFAULT_SEED,
    edges: Sequence[tuple[float, float]] = REGION_EDGES,
) -> pd.DataFrame:
    """Sliced W2 between joint draws and reference draws over each local region."""
    labels = region_labels(test_points, edges)
    rows = []
    for label in sorted({str(x) for x in labels if x}):
        cols = np.flatnonzero(labels == label)
        rows.append(
            {
                "region": label,
                "method": method,
                "value": sliced_w2(draws[:, cols], reference[:, cols], n_projections, seed),
                "n_locations": len(cols),
            }
        )
    return pd.DataFrame(rows, columns=["region", "method", "value", "n_locations"])


def mse_and_coverage(
    truth: pd.DataFrame | ArrayLike, summaries: pd.DataFrame, level: float = 0.95
) -> tuple[float, float]:
    """Mean squared error of posterior means and coverage of the central intervals.

    `truth` is either a frame with `location_index, value` or an array indexed
    like the summary rows.
    """
    lo_name, hi_name = quantile_names(level)
    missing = {"location_index", "post_mean", lo_name, hi_name} - set(summaries.columns)
    if missing:
        raise MetricsError("summary columns missing", columns=",".join(sorted(missing)))
    if not isinstance(truth, pd.DataFrame):
        values = np.asarray(truth, dtype=float).reshape(-1)
        if len(values) != len(summaries):
            raise MetricsError("misaligned", truth=len(values), summaries=len(summaries))
        index = summaries["location_index"].to_numpy()
        truth = pd.DataFrame({"location_index": index, "value": values})
    if len(truth) != len(summaries) or set(truth["location_index"]) != set(
        summaries["location_index"]
    ):
        raise MetricsError("misaligned", truth=len(truth), summaries=len(summaries))
    if len(summaries) == 0:
        raise MetricsError("no predictions to score")
    merged = summaries.merge(
        truth[["location_index", "value"]], on="location_index", validate="one_to_one"
    )
    err = merged["post_mean"] - merged["value"]
    inside = (merged[lo_name] <= merged["value"]) & (merged["value"] <= merged[hi_name])
    return float(np.mean(err**2)), float(np.mean(inside))
