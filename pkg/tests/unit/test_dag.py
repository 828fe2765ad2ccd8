import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dag import build_dag, prediction_parents
from errors import DagError
from geometry import LocationSet
from partition import AlternatingPartition, partition_locations


def _edges(dag):
    return set(zip(dag.to_frame()["parent_position"], dag.to_frame()["child_position"]))


def test_two_points_one_edge():
    locations = LocationSet([[0.0, 0.0], [0.5, 0.0]])
    dag = build_dag(partition_locations(locations, rho=1.0))
    assert dag.partition.n_subsets == 2
    assert _edges(dag) == {(0, 1)}


def test_radius_above_diameter_gives_complete_graph(uniform):
    locations = uniform(15, seed=2)
    dag = build_dag(partition_locations(locations, rho=2.0))
    assert dag.partition.n_subsets == 15
    for i in range(dag.n):
        assert dag.parents(i).tolist() == list(range(i))


def test_first_subset_chains_through_nearest_predecessor():
    locations = LocationSet([[0.0, 0.0], [1.0, 0.0], [2.5, 0.0]])
    dag = build_dag(partition_locations(locations, rho=0.5))
    assert dag.partition.n_subsets == 1
    points = locations.points[dag.order]
    assert dag.parents(0).tolist() == []
    for i in range(1, dag.n):
        dist = np.linalg.norm(points[:i] - points[i], axis=1)
        assert dag.parents(i).tolist() == [int(np.argmin(dist))]


def test_order_is_subset_major(uniform):
    dag = build_dag(partition_locations(uniform(60, seed=8), rho=0.25))
    assert np.all(np.diff(dag.subset_of_position) >= 0)
    np.testing.assert_array_equal(dag.order[dag.position], np.arange(dag.n))


def test_invalid_partition_is_rejected():
    locations = LocationSet([[0.0, 0.0], [0.1, 0.0]])
    bad = AlternatingPartition(locations=locations, rho=1.0, subsets=(np.array([0, 1]),))
    with pytest.raises(DagError, match="invalid partition"):
        build_dag(bad)


def test_prediction_parents_open_ball():
    training = LocationSet([[0.0, 0.0]])
    dag = build_dag(partition_locations(training, rho=0.4))
    assert prediction_parents(dag, training, [0.4, 0.0]).tolist() == []
    assert prediction_parents(dag, training, [0.2, 0.0]).tolist() == [0]
    with pytest.raises(DagError, match="already observed"):
        prediction_parents(dag, training, [0.0, 0.0])


def test_prediction_parents_match_linear_scan(uniform):
    training = uniform(100, seed=6)
    dag = build_dag(partition_locations(training, rho=0.15))
    for s in np.random.default_rng(1).uniform(size=(20, 2)):
        expected = np.flatnonzero(np.linalg.norm(training.points - s, axis=1) < 0.15)
        assert prediction_parents(dag, training, s).tolist() == expected.tolist()


@settings(max_examples=30, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=2**31),
    n=st.integers(min_value=2, max_value=60),
    rho=st.floats(min_value=0.05, max_value=0.7),
)
def test_edges_outside_first_subset_are_exactly_the_close_pairs(seed, n, rho):
    locations = LocationSet(np.random.default_rng(seed).uniform(size=(n, 2)))
    dag = build_dag(partition_locations(locations, rho, seed=seed))
    points = locations.points[dag.order]
    subset = dag.subset_of_position
    for j in range(dag.n):
        parents = set(dag.parents(j).tolist())
        assert all(i < j for i in parents)
        if subset[j] == 0:
            assert len(parents) == (0 if j == 0 else 1)
            continue
        close = {
            i
            for i in range(j)
            if subset[i] < subset[j] and np.linalg.norm(points[i] - points[j]) < rho
        }
        assert parents == close
