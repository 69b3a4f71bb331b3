import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nngls.exceptions import DegenerateDesignError
from nngls.spatial_core import (SpatialDataset, build_dag, find_prediction_neighbors,
                                min_pairwise_distance, ordering_permutation)

from conftest import uniform_sites


def brute_dag(S, m, order):
    """O(n^2) reference: for each position, sort earlier points by (distance, index)."""
    out = {}
    for k, j in enumerate(order):
        prev = order[:k]
        d = np.hypot(*(S[prev] - S[j]).T)
        keys = sorted(zip(d, prev))
        out[j] = [int(i) for _, i in keys[:m]]
    return out


def test_dataset_validation():
    S = uniform_sites(5)
    ds = SpatialDataset(np.ones(5), np.zeros(5), S)
    assert ds.X.shape == (5, 1) and ds.d == 1 and ds.n == 5
    with pytest.raises(ValueError, match="row counts"):
        SpatialDataset(np.ones((4, 2)), np.zeros(5), S)
    with pytest.raises(ValueError, match="shape"):
        SpatialDataset(np.ones(5), np.zeros(5), np.ones((5, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        SpatialDataset(np.ones(5), np.array([0, 1, np.nan, 0, 0.0]), S)


def test_duplicate_coordinates_rejected():
    S = uniform_sites(6)
    S[3] = S[1]
    with pytest.raises(DegenerateDesignError, match="duplicate coordinates"):
        SpatialDataset(np.ones(6), np.zeros(6), S)
    with pytest.raises(DegenerateDesignError):
        build_dag(S, 3)


def test_orderings():
    S = np.array([[3.0, 0.0], [0.0, 1.0], [1.0, 1.5], [0.5, 0.0]])
    order, name = ordering_permutation(S)
    np.testing.assert_array_equal(order, [3, 1, 2, 0])
    assert name == "coordinate_sum"
    order, _ = ordering_permutation(S, "first_axis")
    np.testing.assert_array_equal(order, [1, 3, 2, 0])
    order, name = ordering_permutation(S, [2, 0, 1, 3])
    assert name == "given"
    with pytest.raises(ValueError):
        ordering_permutation(S, [0, 0, 1, 2])
    with pytest.raises(ValueError):
        ordering_permutation(S, "hilbert")


def test_first_location_has_no_neighbors_and_counts():
    S = uniform_sites(40, seed=2)
    dag = build_dag(S, 5)
    assert dag.counts[dag.order[0]] == 0
    np.testing.assert_array_equal(dag.counts[dag.order], np.minimum(np.arange(40), 5))
    assert dag.describe() == {"m": 5, "ordering": "coordinate_sum"}


@pytest.mark.parametrize("n,m", [(30, 3), (200, 10), (1500, 20)])
def test_dag_matches_brute_force(n, m):
    S = uniform_sites(n, seed=n)
    dag = build_dag(S, m)
    ref = brute_dag(S, m, dag.order)
    for j in range(n):
        assert list(dag.neighbors[j]) == ref[j]


def test_neighbors_precede_in_ordering():
    S = uniform_sites(300, seed=5)
    dag = build_dag(S, 8, "first_axis")
    for k, nb in enumerate(dag.neighbors_by_position()):
        assert np.all(nb < k)


def test_ties_broken_by_lower_index():
    # regular grid: many equal distances
    g = np.arange(6.0)
    S = np.array([(a, b) for a in g for b in g])
    dag = build_dag(S, 4)
    ref = brute_dag(S, 4, dag.order)
    for j in range(len(S)):
        assert list(dag.neighbors[j]) == ref[j]


def test_m_larger_than_n():
    S = uniform_sites(5, seed=1)
    dag = build_dag(S, 20)
    assert dag.width == 4
    assert sorted(len(nb) for nb in dag.neighbors) == [0, 1, 2, 3, 4]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 120), m=st.integers(0, 12), seed=st.integers(0, 10_000))
def test_dag_property(n, m, seed):
    S = uniform_sites(n, seed=seed)
    dag = build_dag(S, m)
    ref = brute_dag(S, m, dag.order)
    for j in range(n):
        assert list(dag.neighbors[j]) == ref[j]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 80), q=st.integers(0, 20), m=st.integers(0, 15), seed=st.integers(0, 10_000))
def test_prediction_neighbors_brute_force(n, q, m, seed):
    rng = np.random.default_rng(seed)
    S = rng.uniform(0, 1, (n, 2))
    Q = rng.uniform(0, 1, (q, 2))
    pn = find_prediction_neighbors(S, Q, m)
    k = min(m, n)
    for r in range(q):
        d = np.hypot(*(S - Q[r]).T)
        ref = [i for _, i in sorted(zip(d, range(n)))[:k]]
        assert list(pn.nbr[r]) == ref
        np.testing.assert_allclose(pn.dist[r], np.sort(d)[:k])


def test_min_pairwise_distance():
    S = np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 4.5]])
    assert min_pairwise_distance(S) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        min_pairwise_distance(S[:1])
