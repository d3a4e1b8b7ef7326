import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgegraph.cluster.hdbscan import (core_distances, hdbscan_fit, mutual_reachability,
                                         pairwise_distances, prim_mst)
from bridgegraph.cluster.params import HdbscanParams, UmapParams
from bridgegraph.cluster.profile import (profile_clusters, read_embedding,
                                         write_cluster_statistics, write_embedding)
from bridgegraph.cluster.umap import fit_ab, fuzzy_graph, smooth_knn, umap_embed
from bridgegraph.features import FeatureMatrix, prepare, read_features, write_features
from oracles import kruskal_weight


def blobs(seed, sizes, centers, scale=1.0, dim=2):
    rng = np.random.default_rng(seed)
    return np.vstack([rng.normal(c, scale, (s, dim)) for s, c in zip(sizes, centers)])


# ---------------------------------------------------------------------------
# HDBSCAN


def test_mutual_reachability_hand_case():
    d = pairwise_distances(np.array([[0.0], [1.0], [10.0]]))
    assert core_distances(d, 2).tolist() == [10.0, 9.0, 10.0]
    assert mutual_reachability(d, 2)[0, 1] == 10.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 60), st.integers(1, 8))
def test_mutual_reachability_symmetric_and_dominating(seed, n, k):
    x = np.random.default_rng(seed).normal(size=(n, 2))
    d = pairwise_distances(x)
    m = mutual_reachability(d, k)
    assert np.array_equal(m, m.T)
    assert np.all(m >= d)


@pytest.mark.parametrize("seed,n", [(0, 50), (1, 200), (2, 500)])
def test_mst_weight_matches_kruskal(seed, n):
    x = np.random.default_rng(seed).normal(size=(n, 2))
    m = mutual_reachability(pairwise_distances(x), 5)
    mst = prim_mst(m)
    assert len(mst) == n - 1
    assert mst[:, 2].sum() == pytest.approx(kruskal_weight(m), rel=1e-12)


def test_two_blobs_two_clusters():
    x = blobs(0, [25, 25], [(0, 0), (10, 0)], scale=0.5)
    a = hdbscan_fit(x, HdbscanParams(min_cluster_size=20, min_samples=10))
    assert a.n_clusters == 2 and a.noise_fraction == 0.0


def test_too_few_points_all_noise():
    x = np.random.default_rng(0).normal(size=(10, 2))
    assert hdbscan_fit(x, HdbscanParams(20, 10)).labels.tolist() == [-1] * 10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_clusters_respect_min_size_and_dense_labels(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 5))
    x = blobs(seed, rng.integers(5, 50, k), rng.uniform(-30, 30, (k, 2)), scale=rng.uniform(0.5, 3))
    p = HdbscanParams(int(rng.integers(3, 15)), int(rng.integers(1, 8)))
    lab = hdbscan_fit(x, p).labels
    present = sorted(set(lab.tolist()) - {-1})
    assert present == list(range(len(present)))
    for c in present:
        assert (lab == c).sum() >= p.min_cluster_size


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_labels_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = blobs(seed, [40, 30, 50], [(0, 0), (12, 0), (0, 15)], scale=1.5)
    perm = rng.permutation(len(x))
    p = HdbscanParams(10, 5)
    a = hdbscan_fit(x, p).labels
    b = hdbscan_fit(x[perm], p).labels
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    b = b[inv]
    # same partition up to renaming
    pairs = set(zip(a.tolist(), b.tolist()))
    assert len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))
    assert all((u == -1) == (v == -1) for u, v in pairs)


# ---------------------------------------------------------------------------
# UMAP


def test_smooth_knn_targets():
    d = np.array([[1.0, 2.0, 3.0, 4.0]])
    rho, sigma = smooth_knn(d, 4)
    assert rho[0] == 1.0
    assert np.exp(-(d[0] - 1.0) / sigma[0]).sum() == pytest.approx(math.log2(4), abs=1e-4)


def test_fuzzy_graph_weights():
    x = np.random.default_rng(0).normal(size=(40, 5))
    p = UmapParams(n_neighbors=5)
    fg = fuzzy_graph(x, p)
    w = fg.directed.toarray()
    for i in range(fg.n):
        assert w[i, fg.knn_index[i, 0]] == 1.0
        j = fg.knn_index[i, 1]
        expected = math.exp(-max(0.0, fg.knn_dist[i, 1] - fg.rho[i]) / fg.sigma[i])
        assert w[i, j] == pytest.approx(expected)
    g = fg.graph.toarray()
    assert np.allclose(g, g.T) and g.max() <= 1.0 and g.min() >= 0.0
    assert np.all(fg.sigma > 0)
    # d = rho + sigma gives 1/e
    assert math.exp(-((fg.rho[0] + fg.sigma[0]) - fg.rho[0]) / fg.sigma[0]) == pytest.approx(0.36787944)


def test_duplicate_points_floor_sigma():
    x = np.zeros((20, 3))
    fg = fuzzy_graph(x, UmapParams(n_neighbors=5))
    assert np.all(fg.sigma >= 1e-8) and np.all(np.isfinite(fg.graph.data))


def test_fit_ab_reference_values():
    a, b = fit_ab(0.1)
    assert a == pytest.approx(1.577, abs=2e-3) and b == pytest.approx(0.895, abs=2e-3)


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        fuzzy_graph(np.zeros((10, 2)), UmapParams(n_neighbors=15))


def test_two_blobs_separate_in_embedding():
    x = blobs(1, [50, 50], [np.zeros(10), np.full(10, 20.0)], dim=10)
    e = umap_embed(x, UmapParams(seed=3))
    ca, cb = e[:50].mean(axis=0), e[50:].mean(axis=0)
    radius = np.mean([np.linalg.norm(e[:50] - ca, axis=1).mean(),
                      np.linalg.norm(e[50:] - cb, axis=1).mean()])
    assert np.linalg.norm(ca - cb) > 3 * radius


def test_embedding_deterministic_and_seed_dependent():
    x = blobs(2, [30, 30], [np.zeros(4), np.full(4, 6.0)], dim=4)
    a = umap_embed(x, UmapParams(seed=1, n_epochs=50))
    b = umap_embed(x, UmapParams(seed=1, n_epochs=50))
    c = umap_embed(x, UmapParams(seed=2, n_epochs=50))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.all(np.isfinite(a))


# ---------------------------------------------------------------------------
# profiles


def fm(raw, cities):
    raw = np.asarray(raw, dtype=float)
    n = raw.shape[1]
    return prepare(FeatureMatrix(list(range(len(raw))), [f"f{j}" for j in range(n)],
                                 ["x"] * n, raw, cities))


def test_profile_identical_rows_and_single_city():
    raw = [[1, 2], [1, 2], [1, 2], [5, 0], [6, 1]]
    m = fm(raw, ["a", "a", "a", "b", "a"])
    t = profile_clusters(np.array([0, 0, 0, 1, -1]), m)
    assert t.profiles[0].std.tolist() == [0.0, 0.0]
    assert t.profiles[0].city_pct == {"a": 100.0, "b": 0.0}
    assert sum(p.size for p in t.profiles) == 5 - t.noise


def test_cluster_z_recomputes_from_exported_csv(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(30, 4)) * [1, 10, 100, 0.1] + [0, 5, -3, 1]
    m = fm(raw, ["t"] * 30)
    labels = rng.integers(-1, 3, 30)
    t = profile_clusters(labels, m)
    write_features(m, tmp_path / "features.csv")
    write_cluster_statistics(t, tmp_path / "stats.csv")
    _, names, z = read_features(tmp_path / "features.csv")
    import csv
    rows = list(csv.DictReader(open(tmp_path / "stats.csv")))
    for r in rows:
        c = int(r["cluster_id"])
        for j, n in enumerate(names):
            assert float(r[f"{n}_z"]) == pytest.approx(z[labels == c, j].mean(), abs=1e-9)


def test_embedding_csv_roundtrip(tmp_path):
    e = np.random.default_rng(0).normal(size=(5, 2))
    write_embedding([1, 2, 3, 4, 5], e, np.array([0, 0, 1, -1, 1]), tmp_path / "e.csv")
    ids, back, lab = read_embedding(tmp_path / "e.csv")
    assert ids == [1, 2, 3, 4, 5] and np.array_equal(back, e) and lab.tolist() == [0, 0, 1, -1, 1]


def test_cluster_statistics_roundtrip(tmp_path):
    from bridgegraph.cluster.profile import read_cluster_statistics
    rng = np.random.default_rng(4)
    m = fm(rng.normal(size=(12, 3)), ["a"] * 6 + ["b"] * 6)
    t = profile_clusters(np.array([0, 0, 0, 1, 1, 1, 0, 1, -1, -1, 0, 1]), m)
    write_cluster_statistics(t, tmp_path / "s.csv")
    back = read_cluster_statistics(tmp_path / "s.csv")
    assert back.names == t.names and back.cities == ["a", "b"]
    for p, q in zip(t.profiles, back.profiles):
        assert (p.cluster_id, p.size) == (q.cluster_id, q.size)
        assert np.array_equal(p.z, q.z) and np.array_equal(p.mean, q.mean)
        assert q.city_pct == pytest.approx(p.city_pct, abs=1e-4)
