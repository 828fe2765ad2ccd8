"""Sparse precision factor of the radial neighbors process.

The factor is Phi = (I - B^T) D^-1 (I - B) over graph positions, where row i of the
strictly lower-triangular B holds the kriging weights of node i on its parents and
D[i] is the matching conditional variance. Public helpers take and return vectors in
location order; the permutation to positions is handled here.
"""

import logging
import math
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd
import scipy.sparse as sp
from numpy.typing import ArrayLike
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from constants import DEFAULT_DIAGNOSTIC_CAP
from dag import RadialDag
from errors import DiagnosticCapError, FactorizationError, PrecisionError
from geometry import LocationSet, as_points
from kernels import Kernel, cov_matrix, make_kernel
from models import KernelSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SparseFactor:
    """B (CSR, positions x positions), D (positions) and the graph order."""

    B_hat: sp.csr_matrix
    D_hat: np.ndarray
    order: np.ndarray

    @property
    def n(self) -> int:
        """Number of nodes."""
        return len(self.D_hat)

    @cached_property
    def position(self) -> np.ndarray:
        """Location index -> position."""
        position = np.empty_like(self.order)
        position[self.order] = np.arange(self.n)
        return position

    def to_positions(self, x: np.ndarray) -> np.ndarray:
        """Reindex a location-ordered array (first axis) by position."""
        return x[self.order]

    def to_locations(self, xp: np.ndarray) -> np.ndarray:
        """Reindex a position-ordered array (first axis) by location."""
        return xp[self.position]

    def to_frames(self) -> tuple[pd.DataFrame, pd.DataFrame]:
        """Triplets `row, col, value` of B and `row, d_value` of D, in positions."""
        coo = self.B_hat.tocoo()
        b = pd.DataFrame({"row": coo.row, "col": coo.col, "value": coo.data})
        d = pd.DataFrame({"row": np.arange(self.n), "d_value": self.D_hat})
        return b.sort_values(["row", "col"], ignore_index=True), d


@dataclass(frozen=True, eq=False)
class ParentGeometry:
    """Parent blocks grouped by parent count, with all distances precomputed.

    Kernel parameters change every MCMC step while the graph does not, so only
    kernel evaluations and the small solves are repeated.
    """

    n: int
    rows: tuple[np.ndarray, ...]
    parents: tuple[np.ndarray, ...]
    d_parents: tuple[np.ndarray, ...]  # (k, m, m)
    d_child: tuple[np.ndarray, ...]  # (k, m)
    roots: np.ndarray


def _group_rows(
    points: np.ndarray, indptr: np.ndarray, indices: np.ndarray, rows: np.ndarray
) -> ParentGeometry:
    counts = indptr[rows + 1] - indptr[rows]
    groups, parents, d_pp, d_pc = [], [], [], []
    for m in np.unique(counts):
        members = rows[counts == m]
        if m == 0:
            continue
        pa = np.stack([indices[indptr[i] : indptr[i] + m] for i in members])
        pp = points[pa]  # (k, m, d)
        groups.append(members)
        parents.append(pa)
        d_pp.append(np.linalg.norm(pp[:, :, None, :] - pp[:, None, :, :], axis=-1))
        d_pc.append(np.linalg.norm(pp - points[members][:, None, :], axis=-1))
    return ParentGeometry(
        n=len(indptr) - 1,
        rows=tuple(groups),
        parents=tuple(parents),
        d_parents=tuple(d_pp),
        d_child=tuple(d_pc),
        roots=rows[counts == 0],
    )


_GEOMETRY: "weakref.WeakKeyDictionary[RadialDag, ParentGeometry]" = weakref.WeakKeyDictionary()


def parent_geometry(dag: RadialDag, rows: np.ndarray | None = None) -> ParentGeometry:
    """Parent geometry of `dag` (all rows are cached; a row subset is not)."""
    if rows is not None:
        points = dag.locations.points[dag.order]
        return _group_rows(points, dag.indptr, dag.indices, np.asarray(rows, dtype=np.intp))
    if dag not in _GEOMETRY:
        points = dag.locations.points[dag.order]
        _GEOMETRY[dag] = _group_rows(points, dag.indptr, dag.indices, np.arange(dag.n))
    return _GEOMETRY[dag]


def _solve_row(
    block: np.ndarray, rhs: np.ndarray, variance: float, row: int, jitter: float
) -> tuple[np.ndarray, float]:
    """Kriging weights and conditional variance of one row, with a jitter retry."""
    eye = np.eye(len(block))
    try:
        for attempt in Retrying(
            stop=stop_after_attempt(2 if jitter > 0 else 1),
            retry=retry_if_exception_type(LinAlgError),
            reraise=True,
        ):
            with attempt:
                ridge = jitter if attempt.retry_state.attempt_number > 1 else 0.0
                if ridge:
                    logger.warning(
                        f"row {row}: parent block not positive definite, adding {ridge:g}"
                    )
                chol = cho_factor(block + ridge * eye, lower=True)
                coef = cho_solve(chol, rhs)
                cond = variance - float(rhs @ coef)
                if not cond > 0:
                    raise LinAlgError(f"nonpositive conditional variance {cond}")
    except LinAlgError:
        raise FactorizationError(
            "parent covariance block is numerically singular",
            row=row,
            min_eigenvalue=float(np.linalg.eigvalsh(block)[0]),
        ) from None
    return coef, cond


def _solve_group(
    kernel: Kernel,
    rows: np.ndarray,
    d_pp: np.ndarray,
    d_pc: np.ndarray,
    nugget: float,
    jitter: float,
) -> tuple[np.ndarray, np.ndarray]:
    variance = kernel.variance + nugget
    blocks = kernel(d_pp)
    m = blocks.shape[-1]
    blocks[:, np.arange(m), np.arange(m)] += nugget
    rhs = kernel(d_pc)
    try:
        chol = np.linalg.cholesky(blocks)
        half = np.linalg.solve(chol, rhs[..., None])
        coef = np.linalg.solve(np.swapaxes(chol, -1, -2), half)[..., 0]
        cond = variance - np.einsum("kmi,kmi->k", half, half)
        bad = np.flatnonzero(~(cond > 0))
    except np.linalg.LinAlgError:
        coef = np.empty_like(rhs)
        cond = np.empty(len(rows))
        bad = np.arange(len(rows))
    for j in bad:
        coef[j], cond[j] = _solve_row(blocks[j], rhs[j], variance, int(rows[j]), jitter)
    return coef, cond


def conditional_coefficients(
    geometry: ParentGeometry,
    kernel: KernelSpec | Kernel,
    nugget: float = 0.0,
    jitter: float = 0.0,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """CSR pieces (row, col, value) and conditional variances for every row of `geometry`."""
    kernel = make_kernel(kernel)
    work = list(zip(geometry.rows, geometry.d_parents, geometry.d_child))

    def solve(item):
        rows, d_pp, d_pc = item
        return _solve_group(kernel, rows, d_pp, d_pc, nugget, jitter)

    if threads > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            solved = list(pool.map(solve, work))
    else:
        solved = [solve(item) for item in work]

    cond = np.full(geometry.n, np.nan)
    cond[geometry.roots] = kernel.variance + nugget
    r_parts, c_parts, v_parts = [], [], []
    for rows, parents, (coef, var) in zip(geometry.rows, geometry.parents, solved):
        cond[rows] = var
        r_parts.append(np.repeat(rows, parents.shape[1]))
        c_parts.append(parents.ravel())
        v_parts.append(coef.ravel())
    if r_parts:
        return np.concatenate(r_parts), np.concatenate(c_parts), np.concatenate(v_parts), cond
    empty = np.empty(0, dtype=np.intp)
    return empty, empty, np.empty(0), cond


def build_sparse_factor(
    dag: RadialDag,
    k: KernelSpec | Kernel,
    jitter: float = 0.0,
    nugget: float = 0.0,
    threads: int = 1,
) -> SparseFactor:
    """Row-wise kriging factorization of the radial neighbors precision.

    `nugget` adds an independent noise variance to every location, which gives the
    factor of the response (latent plus noise) process.
    """
    if jitter < 0:
        raise PrecisionError("jitter must be nonnegative", jitter=jitter)
    rows, cols, values, cond = conditional_coefficients(
        parent_geometry(dag), k, nugget=nugget, jitter=jitter, threads=threads
    )
    B = sp.csr_matrix((values, (rows, cols)), shape=(dag.n, dag.n))
    B.sort_indices()
    return SparseFactor(B_hat=B, D_hat=cond, order=dag.order)


def _check_length(f: SparseFactor, x: np.ndarray) -> None:
    if x.shape[0] != f.n:
        raise PrecisionError("dimension mismatch", expected=f.n, got=x.shape[0])


def _scale(v: np.ndarray, d: np.ndarray) -> np.ndarray:
    return v / d if v.ndim == 1 else v / d[:, None]


def apply_precision(f: SparseFactor, x: ArrayLike) -> np.ndarray:
    """Phi x via two sparse triangular products; vectors or column stacks."""
    x = np.asarray(x, dtype=float)
    _check_length(f, x)
    xp = f.to_positions(x)
    v = _scale(xp - f.B_hat @ xp, f.D_hat)
    return f.to_locations(v - f.B_hat.T @ v)


def apply_sqrt_factor(f: SparseFactor, w: ArrayLike) -> np.ndarray:
    """L w with L = (I - B^T) D^-1/2, so that L L^T = Phi."""
    w = np.asarray(w, dtype=float)
    _check_length(f, w)
    y = _scale(w, np.sqrt(f.D_hat))
    return f.to_locations(y - f.B_hat.T @ y)


def precision_diagonal(f: SparseFactor) -> np.ndarray:
    """diag(Phi) in location order."""
    inv_d = 1.0 / f.D_hat
    return f.to_locations(inv_d + f.B_hat.multiply(f.B_hat).T @ inv_d)


def log_density(f: SparseFactor, z: ArrayLike) -> float:
    """log N(z; 0, Phi^-1) as a sum of the n conditional densities."""
    z = np.asarray(z, dtype=float)
    _check_length(f, z)
    zp = f.to_positions(z)
    resid = zp - f.B_hat @ zp
    return float(
        -0.5 * np.sum(resid * resid / f.D_hat)
        - 0.5 * np.sum(np.log(f.D_hat))
        - 0.5 * f.n * math.log(2 * math.pi)
    )


def _check_cap(n: int, cap: int) -> None:
    if n > cap:
        raise DiagnosticCapError(
            "dense diagnostics are limited to small instances", n=n, cap=cap
        )


def _unit_lower(f: SparseFactor) -> np.ndarray:
    return np.eye(f.n) - f.B_hat.toarray()


def dense_precision(f: SparseFactor, cap: int = DEFAULT_DIAGNOSTIC_CAP) -> np.ndarray:
    """Materialized Phi in location order."""
    _check_cap(f.n, cap)
    ib = _unit_lower(f)
    phi = ib.T @ (ib / f.D_hat[:, None])
    return phi[np.ix_(f.position, f.position)]


def dense_radgp_covariance(f: SparseFactor, cap: int = DEFAULT_DIAGNOSTIC_CAP) -> np.ndarray:
    """Phi^-1 in location order, from the triangular factor."""
    _check_cap(f.n, cap)
    inv = solve_triangular(_unit_lower(f), np.eye(f.n), lower=True, unit_diagonal=True)
    cov = (inv * f.D_hat) @ inv.T
    cov = 0.5 * (cov + cov.T)
    return cov[np.ix_(f.position, f.position)]


def sqrt_factor_dense(f: SparseFactor, cap: int = DEFAULT_DIAGNOSTIC_CAP) -> np.ndarray:
    """L = (I - B^T) D^-1/2 in positions; column i is l_i."""
    _check_cap(f.n, cap)
    return _unit_lower(f).T / np.sqrt(f.D_hat)[None, :]


def build_exact_factor(
    locations: LocationSet,
    k: KernelSpec | Kernel,
    order: np.ndarray | None = None,
    nugget: float = 0.0,
    cap: int = DEFAULT_DIAGNOSTIC_CAP,
) -> SparseFactor:
    """Exact GP factor: every node conditions on all of its predecessors."""
    n = len(locations)
    _check_cap(n, cap)
    order = np.arange(n) if order is None else np.asarray(order, dtype=np.intp)
    sigma = cov_matrix(k, locations.points[order], nugget=nugget)
    try:
        chol = cholesky(sigma, lower=True)
    except LinAlgError:
        raise FactorizationError(
            "covariance matrix is not positive definite",
            n=n,
            min_eigenvalue=float(np.linalg.eigvalsh(sigma)[0]),
        ) from None
    diag = np.diag(chol)
    inv = solve_triangular(chol, np.eye(n), lower=True)
    B = np.tril(np.eye(n) - diag[:, None] * inv, k=-1)
    return SparseFactor(B_hat=sp.csr_matrix(B), D_hat=diag**2, order=order)


def finite_dimensional_covariance(
    dag: RadialDag,
    k: KernelSpec | Kernel,
    in_graph: ArrayLike = (),
    new_points: ArrayLike | None = None,
) -> np.ndarray:
    """Covariance the process assigns to graph locations and to unseen locations.

    `in_graph` are location indices of `dag`; `new_points` are coordinates outside
    the graph, which depend on the training set (the first partitioned set) only
    and are conditionally independent of each other. Rows follow `in_graph` then
    `new_points`.
    """
    kernel = make_kernel(k)
    in_graph = np.asarray(in_graph, dtype=np.intp).reshape(-1)
    start, stop = dag.partition.source_ranges[0]
    train = np.arange(start, stop)
    new = (
        np.empty((0, dag.locations.dim))
        if new_points is None
        else as_points(new_points, dim=dag.locations.dim)
    )

    last = int(dag.position[in_graph].max()) if in_graph.size else -1
    closure = np.union1d(np.arange(last + 1), dag.position[train])
    _check_cap(len(closure), DEFAULT_DIAGNOSTIC_CAP)

    factor = build_sparse_factor(dag, kernel)
    B = factor.B_hat[closure][:, closure].toarray()
    inv = solve_triangular(
        np.eye(len(closure)) - B, np.eye(len(closure)), lower=True, unit_diagonal=True
    )
    cov_c = (inv * factor.D_hat[closure]) @ inv.T

    slot = {int(p): i for i, p in enumerate(closure)}
    train_pts = dag.locations.points[train]
    rows = np.zeros((len(in_graph) + len(new), len(closure)))
    for r, loc in enumerate(in_graph):
        rows[r, slot[int(dag.position[loc])]] = 1.0
    extra = np.zeros(len(rows))
    for r, point in enumerate(new, start=len(in_graph)):
        dist = np.linalg.norm(train_pts - point, axis=1)
        if np.any(dist == 0):
            raise PrecisionError("new point coincides with a training location")
        pa = np.flatnonzero(dist < dag.rho)
        if pa.size == 0:
            extra[r] = kernel.variance
            continue
        block = kernel(cdist(train_pts[pa], train_pts[pa]))
        rhs = kernel(dist[pa])
        coef, extra[r] = _solve_row(block, rhs, kernel.variance, r, 0.0)
        for j, c in zip(pa, coef):
            rows[r, slot[int(dag.position[train[j]])]] = c
    cov = rows @ cov_c @ rows.T + np.diag(extra)
    return 0.5 * (cov + cov.T)
