import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mier.core import DataError
from mier.embedding import PairEmbeddingSet
from mier.graph import (INTER, INTRA, GraphConfig, build_graph, knn_bruteforce, load_graph,
                        save_graph)


def knn_oracle(x, k):
    """Plain double loop, exact differences, (distance, index) order."""
    n = len(x)
    out = []
    for i in range(n):
        scored = []
        for j in range(n):
            if j != i:
                diff = x[i] - x[j]
                scored.append((float(diff @ diff), j))
        scored.sort()
        out.append([j for _, j in scored[:k]])
    return np.array(out, dtype=np.int64).reshape(n, k)


def test_knn_line_example():
    x = np.array([[0.0], [1.0], [3.0]])
    assert knn_bruteforce(x, 1).tolist() == [[1], [0], [1]]
    assert knn_bruteforce(x, 0).shape == (3, 0)


@pytest.mark.parametrize("k", [2, 6, 10])
def test_knn_matches_oracle(k, rng):
    x = rng.normal(size=(200, 16))
    assert np.array_equal(knn_bruteforce(x, k, block=64), knn_oracle(x, k))


def test_knn_ties_break_by_index():
    x = np.array([[0.0], [1.0], [-1.0], [2.0], [-2.0]])
    assert knn_bruteforce(x, 2)[0].tolist() == [1, 2]
    grid = np.zeros((6, 3))
    assert knn_bruteforce(grid, 3)[4].tolist() == [0, 1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(1, 5), st.integers(0, 2**31))
def test_knn_property_with_duplicates(n, k, seed):
    rng = np.random.default_rng(seed)
    # coarse integer grid forces many exact ties
    x = rng.integers(0, 3, size=(n, 2)).astype(float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got = knn_bruteforce(x, k, block=7, margin=1)
    assert np.array_equal(got, knn_oracle(x, min(k, n - 1)))


def test_knn_clamps_with_warning():
    with pytest.warns(UserWarning, match="clamped"):
        got = knn_bruteforce(np.eye(3), 5)
    assert got.shape == (3, 2)


def _feats(n, P, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(n, d)) for _ in range(P)]


def test_counts_fig_scale():
    g = build_graph(_feats(11, 3), GraphConfig(k=3))
    assert g.counts() == {"nodes": 33, "inter": 66, "intra": 99}


def test_counts_clamped():
    with pytest.warns(UserWarning):
        g = build_graph(_feats(2, 2), GraphConfig(k=5))
    assert g.counts() == {"nodes": 4, "inter": 4, "intra": 4}


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.integers(1, 4), st.integers(0, 10))
def test_counts_formula(n, P, k):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = build_graph(_feats(n, P, seed=n), GraphConfig(k=k))
    kk = min(k, n - 1)
    assert g.counts() == {"nodes": n * P, "inter": n * P * (P - 1), "intra": n * P * kk}
    assert not np.any(g.intra[:, 0] == g.intra[:, 1])
    assert not np.any(g.inter[:, 0] == g.inter[:, 1])


def test_counts_n50_p4_k4():
    g = build_graph(_feats(50, 4), GraphConfig(k=4))
    assert g.counts() == {"nodes": 200, "inter": 600, "intra": 800}


def test_edge_semantics_and_asymmetry():
    # 0 and 1 are close, 2 is far: 1 is 2's neighbour but 2 is nobody's
    x = np.array([[0.0], [1.0], [5.0]])
    g = build_graph([x, x], GraphConfig(k=1))
    assert g.neighbor_sets(2, INTRA) == [1]
    assert g.neighbor_sets(1, INTRA) == [0]
    assert g.neighbor_sets(0, INTRA) == [1]
    assert 2 not in g.neighbor_sets(1, INTRA)
    # layer 1 mirrors layer 0 with offset n
    assert g.neighbor_sets(5, INTRA) == [4]
    assert g.neighbor_sets(0, INTER) == [3] and g.neighbor_sets(3, INTER) == [0]
    types = {(int(s), int(d)): int(t) for s, d, t in g.inter}
    assert types[(0, 3)] == 1 and types[(3, 0)] == 2


def test_peers_are_bijections():
    g = build_graph(_feats(7, 3), GraphConfig(k=2))
    for t in range(9):
        sel = g.inter[g.inter[:, 2] == t]
        if t // 3 == t % 3:
            assert len(sel) == 0
            continue
        assert sorted(sel[:, 0] % 7) == list(range(7))
        assert np.array_equal(sel[:, 0] % 7, sel[:, 1] % 7)


def test_edges_are_read_only():
    g = build_graph(_feats(5, 2), GraphConfig(k=2))
    with pytest.raises(ValueError):
        g.intra[0, 0] = 3


def test_mean_operator_rows():
    g = build_graph(_feats(6, 3), GraphConfig(k=2))
    A = g.mean_operator(INTER).toarray()
    assert np.allclose(A.sum(axis=1), 1.0)
    h = np.arange(18.0)[:, None]
    assert (A @ h)[0, 0] == pytest.approx((h[6, 0] + h[12, 0]) / 2)


def test_coverage_and_dims_checked():
    full = PairEmbeddingSet(0, np.ones((4, 3)), np.arange(4))
    part = PairEmbeddingSet(1, np.ones((3, 3)), np.array([0, 1, 3]))
    with pytest.raises(DataError, match=r"\[2\]"):
        build_graph([full, part])
    with pytest.raises(DataError, match="dims"):
        build_graph([np.ones((4, 3)), np.ones((4, 5))])
    g = build_graph([np.ones((4, 3)), np.ones((4, 5))], GraphConfig(k=1, project_dim=2))
    assert g.dims == [3, 5]


def test_save_load_round_trip(tmp_path):
    g = build_graph(_feats(9, 3), GraphConfig(k=3))
    save_graph(g, tmp_path / "g")
    back = load_graph(tmp_path / "g")
    assert np.array_equal(back.intra, g.intra) and np.array_equal(back.inter, g.inter)
    assert back.counts() == g.counts() and back.k == 3
    assert np.allclose(back.features[1], g.features[1], atol=1e-6)
