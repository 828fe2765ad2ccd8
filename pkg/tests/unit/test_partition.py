import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import PartitionError
from geometry import LocationSet, min_separation
from partition import (
    AlternatingPartition,
    extend_partition,
    partition_locations,
    validate_partition,
)

UNIT_SQUARE = LocationSet([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])


def test_singleton():
    p = partition_locations(LocationSet([[0.5, 0.5]]), rho=0.3)
    assert p.n_subsets == 1
    assert p.subsets[0].tolist() == [0]


def test_unit_square_needs_four_subsets():
    p = partition_locations(UNIT_SQUARE, rho=1.5)
    assert p.n_subsets == 4
    assert sorted(len(s) for s in p.subsets) == [1, 1, 1, 1]


def test_radius_below_separation_gives_one_subset(grid):
    locations = grid(5)
    p = partition_locations(locations, rho=min_separation(locations))
    report = validate_partition(p, locations)
    assert p.n_subsets == 1
    assert report.subset_bound == 1
    assert report.bound_met


def test_labels_and_frame(grid):
    locations = grid(4)
    p = partition_locations(locations, rho=0.4)
    frame = p.to_frame()
    assert frame.columns.tolist() == ["point_index", "subset_index"]
    assert frame["point_index"].tolist() == list(range(16))
    np.testing.assert_array_equal(frame["subset_index"].to_numpy(), p.labels)
    assert set(p.labels.tolist()) == set(range(p.n_subsets))


def test_deterministic_under_seed(uniform):
    locations = uniform(120, seed=4)
    a = partition_locations(locations, rho=0.15, seed=9)
    b = partition_locations(locations, rho=0.15, seed=9)
    assert a.n_subsets == b.n_subsets
    assert all(np.array_equal(x, y) for x, y in zip(a.subsets, b.subsets))


def test_hand_built_violation_is_reported():
    locations = LocationSet([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
    p = AlternatingPartition(
        locations=locations,
        rho=1.0,
        subsets=(np.array([0, 1]), np.array([2])),
        source_ranges=((0, 3),),
    )
    report = validate_partition(p, locations)
    assert len(report.violations) == 1
    violation = report.violations[0]
    assert (violation.i, violation.j) == (0, 1)
    assert violation.distance == pytest.approx(0.1)
    assert not report.valid


def test_missing_and_dangling_indices():
    locations = LocationSet([[0.0, 0.0], [3.0, 0.0], [6.0, 0.0]])
    p = AlternatingPartition(locations=locations, rho=1.0, subsets=(np.array([0, 1]),))
    assert validate_partition(p, locations).missing == [2]
    dangling = AlternatingPartition(locations=locations, rho=1.0, subsets=(np.array([0, 7]),))
    with pytest.raises(PartitionError, match="dangling"):
        validate_partition(dangling, locations)


def test_bound_on_random_points(uniform):
    locations = uniform(200, seed=11)
    rho = 0.15
    p = partition_locations(locations, rho)
    report = validate_partition(p, locations)
    dist = np.linalg.norm(locations.points[:, None] - locations.points[None], axis=-1)
    bound = int((dist < rho).sum(axis=1).max())
    assert report.valid
    assert report.subset_bound == bound
    assert p.n_subsets <= bound


def test_extension_keeps_earlier_subsets(uniform):
    train = uniform(80, seed=1)
    test = LocationSet(np.random.default_rng(2).uniform(size=(30, 2)))
    base = partition_locations(train, rho=0.2)
    extended = extend_partition(base, test, seed=3)

    for old, new in zip(base.subsets, extended.subsets):
        np.testing.assert_array_equal(old, new[new < len(train)])
    # new members only join the last pre-existing subset or later ones
    assert extended.labels[len(train) :].min() >= base.n_subsets - 1
    assert extended.source_ranges == ((0, 80), (80, 110))
    assert validate_partition(extended, extended.locations).valid


def test_extension_rejects_overlap_and_radius_change(grid):
    locations = grid(3)
    base = partition_locations(locations, rho=0.6)
    with pytest.raises(PartitionError, match="already partitioned"):
        extend_partition(base, LocationSet([[0.5, 0.5]]))
    with pytest.raises(PartitionError, match="radius differs"):
        extend_partition(base, LocationSet([[0.25, 0.25]]), rho=0.3)
    assert extend_partition(base, LocationSet.empty(2)) is base


def test_nonpositive_radius():
    with pytest.raises(PartitionError):
        partition_locations(UNIT_SQUARE, rho=0.0)


@pytest.mark.parametrize("kind", ["linear", "grid", "tree"])
def test_index_kind_does_not_change_result(uniform, kind):
    locations = uniform(90, seed=5)
    reference = partition_locations(locations, 0.2, seed=1, index_kind="linear")
    p = partition_locations(locations, 0.2, seed=1, index_kind=kind)
    assert all(np.array_equal(a, b) for a, b in zip(reference.subsets, p.subsets))


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31),
    dim=st.integers(min_value=1, max_value=3),
    n=st.integers(min_value=2, max_value=80),
    rho=st.floats(min_value=0.02, max_value=0.8),
)
def test_partition_properties(seed, dim, n, rho):
    locations = LocationSet(np.random.default_rng(seed).uniform(size=(n, dim)))
    p = partition_locations(locations, rho, seed=seed)
    report = validate_partition(p, locations)
    assert report.valid
    assert report.bound_met
    assert sorted(np.concatenate(p.subsets).tolist()) == list(range(n))
