"""Radial neighbors directed acyclic graph.

Locations are ordered subset by subset (D_1 first); within a subset they keep their
input order. A location gets every location of an earlier subset within `rho` as a
parent. Locations of D_1 after the first one also get their Euclidean-nearest
predecessor, so the first subset stays connected.
"""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import pandas as pd

from errors import DagError
from geometry import LocationSet, radius_neighbors
from partition import AlternatingPartition, validate_partition

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RadialDag:
    """Parent lists over ordered positions, stored in compressed row form."""

    locations: LocationSet
    partition: AlternatingPartition
    order: np.ndarray  # position -> location index
    indptr: np.ndarray
    indices: np.ndarray  # parent positions, ascending within each row

    @property
    def rho(self) -> float:
        """Radius the graph was built with."""
        return self.partition.rho

    @property
    def n(self) -> int:
        """Number of nodes."""
        return len(self.order)

    @cached_property
    def position(self) -> np.ndarray:
        """Inverse of `order`: location index -> position."""
        position = np.empty_like(self.order)
        position[self.order] = np.arange(len(self.order))
        return position

    @cached_property
    def subset_of_position(self) -> np.ndarray:
        """Subset id of the node at each position."""
        return self.partition.labels[self.order]

    def parents(self, i: int) -> np.ndarray:
        """Ascending parent positions of position `i`."""
        return self.indices[self.indptr[i] : self.indptr[i + 1]]

    @cached_property
    def n_parents(self) -> np.ndarray:
        """Parent count per position."""
        return np.diff(self.indptr)

    def to_frame(self) -> pd.DataFrame:
        """Edge list `child_position, parent_position`."""
        return pd.DataFrame(
            {
                "child_position": np.repeat(np.arange(self.n), self.n_parents),
                "parent_position": self.indices,
            }
        )


def build_dag(p: AlternatingPartition, locations: LocationSet | None = None) -> RadialDag:
    """Build the radial neighbors graph of partition `p`."""
    locations = p.locations if locations is None else locations
    report = validate_partition(p, locations)
    if not report.valid:
        raise DagError(
            "invalid partition",
            violations=len(report.violations),
            missing=len(report.missing),
            duplicated=len(report.duplicated),
        )

    order = np.concatenate(p.subsets) if p.subsets else np.empty(0, dtype=np.intp)
    position = np.empty_like(order)
    position[order] = np.arange(len(order))
    labels = p.labels
    points = locations.points
    first_subset = len(p.subsets[0]) if p.subsets else 0

    rows: list[np.ndarray] = []
    for i, loc in enumerate(order):
        if i < first_subset:
            if i == 0:
                rows.append(np.empty(0, dtype=np.intp))
                continue
            # nearest predecessor; argmin keeps the smallest position on ties
            dist = np.linalg.norm(points[order[:i]] - points[loc], axis=1)
            rows.append(np.array([int(np.argmin(dist))], dtype=np.intp))
            continue
        nbrs = radius_neighbors(locations, points[loc], p.rho)
        earlier = nbrs[labels[nbrs] < labels[loc]]
        rows.append(np.sort(position[earlier]))

    indptr = np.zeros(len(order) + 1, dtype=np.intp)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.concatenate(rows) if rows else np.empty(0, dtype=np.intp)
    dag = RadialDag(
        locations=locations,
        partition=p,
        order=order,
        indptr=indptr,
        indices=indices.astype(np.intp),
    )
    if dag.n:
        logger.info(
            f"radial graph: n={dag.n}, M={p.n_subsets}, max parents={int(dag.n_parents.max())}"
        )
    return dag


def prediction_parents(dag: RadialDag, training: LocationSet, s) -> np.ndarray:
    """Training indices strictly within the radius of an unobserved location `s`."""
    if training.contains(s):
        raise DagError("location already observed", location=str(np.asarray(s).tolist()))
    return radius_neighbors(training, s, dag.rho)
