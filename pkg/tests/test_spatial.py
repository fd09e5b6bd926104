import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from cfpnp.errors import ConfigurationError
from cfpnp.spatial import build_index, closest_point_search, linear_scan


def knn_oracle(targets, queries, k):
    """Sort every target by (squared distance, index)."""
    out_i = np.full((len(queries), k), -1)
    out_d = np.full((len(queries), k), np.inf)
    for r, q in enumerate(queries):
        d2 = ((targets - q) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(len(targets)), d2))[:k]
        out_i[r, : len(order)] = order
        out_d[r, : len(order)] = d2[order]
    return out_i, out_d


def test_single_point():
    idx = build_index(np.array([[0.0, 0.0]]))
    rng = np.random.default_rng(0)
    i, d2 = idx.query(rng.normal(scale=100, size=(50, 2)))
    assert np.all(i == 0)
    assert len(idx) == 1


def test_uniform_matches_linear_scan():
    rng = np.random.default_rng(1)
    t = rng.uniform(0, 1000, size=(1000, 2))
    q = rng.uniform(-100, 1100, size=(5000, 2))
    i, d2 = build_index(t).query(q)
    ri, rd = linear_scan(t, q)
    np.testing.assert_array_equal(i[:, 0], ri)
    np.testing.assert_array_equal(d2[:, 0], rd)
    # and an outside oracle
    np.testing.assert_array_equal(i[:, 0], cKDTree(t).query(q)[1])


def test_duplicate_returns_lower_index():
    t = np.array([[5.0, 5.0], [1.0, 1.0], [5.0, 5.0], [9.0, 0.0]])
    i, d2 = build_index(t).query(np.array([[5.0, 5.0], [5.1, 5.0]]), k=2)
    np.testing.assert_array_equal(i, [[0, 2], [0, 2]])
    assert d2[0, 0] == 0.0


def test_cps_exact_targets():
    rng = np.random.default_rng(2)
    t = rng.uniform(0, 100, size=(200, 2))
    t[50] = t[10]
    c = closest_point_search(build_index(t), t)
    assert np.all(c.d2 == 0)
    expect = np.arange(200)
    expect[50] = 10
    np.testing.assert_array_equal(c.target, expect)


def test_cps_midpoint_bias():
    c = closest_point_search(build_index(np.array([[0.0, 0.0], [10.0, 0.0]])), np.array([[4.0, 0.0]]), iteration=3)
    assert c.target[0] == 0 and c.d2[0] == 16.0
    assert c.iteration == 3 and len(c) == 1


def test_cps_2000_random():
    rng = np.random.default_rng(3)
    t = rng.uniform(0, 1024, size=(2000, 2))
    p = rng.uniform(0, 1024, size=(2000, 2))
    c = closest_point_search(build_index(t), p)
    ri, rd = linear_scan(t, p)
    np.testing.assert_array_equal(c.target, ri)
    np.testing.assert_array_equal(c.d2, rd)
    np.testing.assert_array_equal(c.distances, np.sqrt(rd))


def test_cps_excludes_invalid():
    t = np.array([[0.0, 0.0], [1.0, 1.0]])
    c = closest_point_search(build_index(t), np.array([[0.1, 0.0], [9, 9], [1, 1]]),
                             valid=np.array([True, False, True]))
    np.testing.assert_array_equal(c.source, [0, 2])
    np.testing.assert_array_equal(c.excluded, [1])
    np.testing.assert_array_equal(c.target, [0, 1])


def test_visit_count_logarithmic():
    rng = np.random.default_rng(4)
    for m in (250, 2000, 16000):
        t = rng.uniform(0, 1, size=(m, 2))
        _, _, visits = build_index(t).query(rng.uniform(0, 1, size=(2000, 2)), return_visits=True)
        assert np.median(visits) < 4 * np.log2(m)


grid = st.integers(0, 6).map(float)
pts2 = st.tuples(grid, grid)


@settings(max_examples=150, deadline=None)
@given(st.lists(pts2, min_size=1, max_size=60), st.lists(pts2, min_size=1, max_size=20),
       st.integers(1, 10), st.integers(1, 9))
def test_knn_with_ties_matches_oracle(targets, queries, k, leaf):
    # integer grids force many equal distances and duplicate targets
    t = np.array(targets)
    q = np.array(queries) + 0.5 * (np.array(queries) % 2)
    i, d2 = build_index(t, leaf_size=leaf).query(q, k)
    ri, rd = knn_oracle(t, q, k)
    np.testing.assert_array_equal(i, ri)
    np.testing.assert_array_equal(d2, rd)


@settings(max_examples=100, deadline=None)
@given(st.lists(pts2, min_size=1, max_size=60), st.lists(pts2, min_size=1, max_size=20),
       st.integers(1, 8), st.floats(0, 20))
def test_radius_query(targets, queries, k, r2):
    t = np.array(targets)
    q = np.array(queries) + 0.25
    i, d2 = build_index(t).query_radius(q, k, r2)
    ri, rd = knn_oracle(t, q, k)
    # slot 0 always holds the nearest; further slots only inside the radius
    np.testing.assert_array_equal(i[:, 0], ri[:, 0])
    keep = rd <= r2
    keep[:, 0] = True
    np.testing.assert_array_equal(i[keep], ri[keep])
    assert np.all(i[~keep] == -1) and np.all(np.isinf(d2[~keep]))


def test_k_beyond_size_pads():
    i, d2 = build_index(np.array([[0.0, 0.0], [1.0, 0.0]])).query(np.array([[0.2, 0.0]]), k=4)
    np.testing.assert_array_equal(i, [[0, 1, -1, -1]])
    assert np.isinf(d2[0, 2:]).all()


def test_nearest():
    assert build_index(np.array([[0.0, 0.0], [3.0, 4.0]])).nearest([3, 3.5]) == (1, 0.25)


@pytest.mark.parametrize("bad", [np.empty((0, 2)), np.zeros((3, 3)), np.array([[0.0, np.nan]])])
def test_bad_targets(bad):
    with pytest.raises(ConfigurationError):
        build_index(bad)


def test_bad_k():
    with pytest.raises(ConfigurationError):
        build_index(np.zeros((2, 2))).query(np.zeros((1, 2)), k=0)


def test_index_is_read_only():
    idx = build_index(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        idx.points[0, 0] = 1.0
