"""Alternating partitions of sequentially arriving location sets.

Two members of the same subset are always at least `rho` apart. Location sets are
partitioned one after another (training first, then each test set); extending a
partition only ever appends to the last subset that existed before the extension
or opens new subsets, so earlier structure is never disturbed.
"""

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from constants import DEFAULT_SEED, IndexKind
from errors import PartitionError
from geometry import LocationSet
from models import PartitionReport, PartitionViolation

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AlternatingPartition:
    """Assignment of locations (indices into `locations`) to subsets D_1..D_M."""

    locations: LocationSet
    rho: float
    subsets: tuple[np.ndarray, ...] = ()
    # [start, stop) of every location set partitioned so far
    source_ranges: tuple[tuple[int, int], ...] = ()
    # subset ids each location set touched
    source_boundaries: tuple[tuple[int, ...], ...] = ()
    seeds: tuple[int, ...] = field(default=())

    @classmethod
    def empty(cls, rho: float, dim: int) -> "AlternatingPartition":
        """A partition of nothing."""
        _check_rho(rho)
        return cls(locations=LocationSet.empty(dim), rho=float(rho))

    @property
    def n_subsets(self) -> int:
        """Number of subsets M."""
        return len(self.subsets)

    @property
    def labels(self) -> np.ndarray:
        """Subset id (0-based) of every location, -1 if unassigned."""
        labels = np.full(len(self.locations), -1, dtype=np.intp)
        for k, members in enumerate(self.subsets):
            labels[members] = k
        return labels

    def subset_bound(self, locations: LocationSet | None = None) -> int:
        """Sum over location sets of the largest open-ball count (the ball includes its center)."""
        locations = locations if locations is not None else self.locations
        bound = 0
        for start, stop in self.source_ranges or ((0, len(locations)),):
            pts = locations.points[start:stop]
            if len(pts) == 0:
                continue
            tree = cKDTree(pts)
            counts = [
                int(np.sum(np.linalg.norm(pts[nbrs] - p, axis=1) < self.rho))
                for p, nbrs in zip(pts, tree.query_ball_point(pts, self.rho))
            ]
            bound += max(counts)
        return bound

    def to_frame(self) -> pd.DataFrame:
        """`point_index, subset_index` rows in point order."""
        labels = self.labels
        return pd.DataFrame({"point_index": np.arange(len(labels)), "subset_index": labels})


def _check_rho(rho: float) -> None:
    if not rho > 0:
        raise PartitionError("radius must be positive", rho=rho)


def extend_partition(
    existing: AlternatingPartition,
    new_set: LocationSet,
    rho: float | None = None,
    seed: int = DEFAULT_SEED,
    index_kind: IndexKind = "auto",
) -> AlternatingPartition:
    """Partition `new_set` on top of `existing`.

    New locations are appended after the existing ones. Selection order is random
    (seeded); the subsets a new location may join start at the last subset present
    on entry.
    """
    rho = existing.rho if rho is None else float(rho)
    _check_rho(rho)
    if len(existing.locations) and rho != existing.rho:
        raise PartitionError(
            "radius differs from the existing partition", rho=rho, existing=existing.rho
        )
    if len(new_set) == 0:
        return existing
    if len(existing.locations):
        gap, _ = cKDTree(existing.locations.points).query(new_set.points, k=1)
        if np.any(gap == 0.0):
            raise PartitionError("locations already partitioned", overlap=int(np.sum(gap == 0.0)))

    union = existing.locations.concat(new_set)
    offset = len(existing.locations)
    n_new = len(new_set)
    index = union.index(rho, index_kind)

    labels = np.full(len(union), -1, dtype=np.intp)
    labels[:offset] = existing.labels
    subsets: list[list[int]] = [list(s) for s in existing.subsets] or [[]]
    first = len(subsets) - 1

    def assign(i: int) -> None:
        taken = set(labels[index.query(union[i], rho)].tolist())
        for j in range(first, len(subsets)):
            if j not in taken:
                subsets[j].append(i)
                labels[i] = j
                return
        subsets.append([i])
        labels[i] = len(subsets) - 1

    rng = np.random.default_rng(seed)
    visited = np.zeros(len(union), dtype=bool)
    visited[:offset] = True
    queued = visited.copy()

    def enqueue(queue: deque, i: int) -> None:
        fresh = [j for j in index.query(union[i], rho) if not queued[j]]
        for j in rng.permutation(np.asarray(fresh, dtype=np.intp)):
            queued[j] = True
            queue.append(int(j))

    for s in offset + rng.permutation(n_new):
        if visited[s]:
            continue
        visited[s] = queued[s] = True
        assign(s)
        queue: deque[int] = deque()
        enqueue(queue, s)
        while queue:
            s2 = queue.popleft()
            visited[s2] = True
            # the open ball around s2 contains s2 itself
            for t in [s2, *index.query(union[s2], rho)]:
                if labels[t] < 0:
                    assign(int(t))
            enqueue(queue, s2)

    result = AlternatingPartition(
        locations=union,
        rho=rho,
        subsets=tuple(np.sort(np.asarray(s, dtype=np.intp)) for s in subsets if s),
        source_ranges=existing.source_ranges + ((offset, offset + n_new),),
        source_boundaries=existing.source_boundaries
        + (tuple(sorted(set(labels[offset:].tolist()))),),
        seeds=existing.seeds + (int(seed),),
    )
    logger.info(f"partitioned {n_new} locations at rho={rho}: M={result.n_subsets}")
    return result


def partition_locations(
    locations: LocationSet, rho: float, seed: int = DEFAULT_SEED, index_kind: IndexKind = "auto"
) -> AlternatingPartition:
    """Partition a single (training) set from scratch."""
    empty = AlternatingPartition.empty(rho, locations.dim)
    return extend_partition(empty, locations, rho, seed, index_kind)


def validate_partition(p: AlternatingPartition, locations: LocationSet) -> PartitionReport:
    """Check separation, coverage and the subset-count bound of `p` over `locations`."""
    n = len(locations)
    members = np.concatenate(p.subsets) if p.subsets else np.empty(0, dtype=np.intp)
    if members.size and (members.min() < 0 or members.max() >= n):
        raise PartitionError("dangling indices", n=n, max_index=int(members.max()))

    counts = np.bincount(members, minlength=n)
    violations = []
    for k, subset in enumerate(p.subsets):
        if len(subset) < 2:
            continue
        pts = locations.points[subset]
        for a, b in sorted(cKDTree(pts).query_pairs(p.rho)):
            dist = float(np.linalg.norm(pts[a] - pts[b]))
            if dist < p.rho:
                violations.append(
                    PartitionViolation(subset=k, i=int(subset[a]), j=int(subset[b]), distance=dist)
                )

    bound = p.subset_bound(locations)
    return PartitionReport(
        n_subsets=p.n_subsets,
        violations=violations,
        missing=np.flatnonzero(counts == 0).tolist(),
        duplicated=np.flatnonzero(counts > 1).tolist(),
        subset_bound=bound,
        bound_met=p.n_subsets <= bound,
    )
