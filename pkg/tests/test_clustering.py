import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterfl.clustering import KMeansModel, kmeans_fit, kmeans_plus_plus, kmeans_predict, lloyd, load_kmeans, save_kmeans
from clusterfl.embedding import ClientEmbedding
from clusterfl.errors import ConfigurationError, InputError
from oracles import blobs


def _embs(x):
    return [ClientEmbedding(i, "REPA", row) for i, row in enumerate(np.asarray(x))]


def test_single_cluster():
    x = np.random.default_rng(0).normal(size=(12, 3)) * [1, 5, 0.1] + 7
    model, assignment = kmeans_fit(_embs(x), 1, seed=0)
    np.testing.assert_allclose(model.centroids[0], 0, atol=1e-6)
    assert set(assignment.values()) == {0}


def test_blobs_recovered():
    x, truth = blobs(30, 5, 10.0, seed=2)
    _, assignment = kmeans_fit(_embs(x), 2, seed=0)
    labels = np.array([assignment[i] for i in range(len(x))])
    assert np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth)


def test_k_equals_n_has_zero_inertia():
    x = np.random.default_rng(3).normal(size=(7, 2))
    model, assignment = kmeans_fit(_embs(x), 7, seed=0)
    assert model.inertia == pytest.approx(0.0, abs=1e-10)
    assert sorted(assignment.values()) == list(range(7))


def test_fewer_points_than_k():
    with pytest.raises(ConfigurationError):
        kmeans_fit(_embs(np.zeros((3, 2))), 4)


def test_constant_dimension_gets_unit_scale():
    x = np.random.default_rng(0).normal(size=(10, 3))
    x[:, 1] = 4.0
    model, _ = kmeans_fit(_embs(x), 2, seed=0)
    assert model.scale[1] == 1.0 and np.all(model.scale > 0)


def test_predict_centroid_preimage():
    x, _ = blobs(20, 3, 8.0, seed=4)
    model, _ = kmeans_fit(_embs(x), 3, seed=1)
    for j in range(3):
        pre = model.centroids[j].astype(np.float64) * model.scale + model.shift
        assert kmeans_predict(model, pre) == j


def test_predict_tie_goes_to_lowest_index():
    model = KMeansModel(np.array([[-1.0, 0.0], [0.0, 5.0], [1.0, 0.0]], np.float32), np.zeros(2), np.ones(2), 0.0)
    assert kmeans_predict(model, np.array([0.0, 0.0])) == 0


def test_predict_dim_mismatch():
    model = KMeansModel(np.zeros((2, 3), np.float32), np.zeros(3), np.ones(3), 0.0)
    with pytest.raises(InputError):
        kmeans_predict(model, np.zeros(4))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(4, 40), k=st.integers(1, 4), d=st.integers(1, 5))
def test_fit_predict_consistency(seed, n, k, d):
    x = np.random.default_rng(seed).normal(size=(n, d))
    embs = _embs(x)
    model, assignment = kmeans_fit(embs, k, restarts=3, seed=seed)
    for e in embs:
        assert kmeans_predict(model, e) == assignment[e.client_id]
    assert set(assignment) == {e.client_id for e in embs}
    assert all(0 <= c < k for c in assignment.values())


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(5, 50), k=st.integers(1, 5))
def test_inertia_non_increasing(seed, n, k):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, 3))
    _, _, history = lloyd(z, kmeans_plus_plus(z, k, rng))
    assert all(b <= a + 1e-9 * max(1.0, a) for a, b in zip(history, history[1:]))


def test_empty_cluster_repair():
    z = np.array([[0.0], [0.1], [0.2], [10.0]])
    # a centroid far from everything starts empty and must be reseeded
    centroids, labels, _ = lloyd(z, np.array([[0.1], [100.0]]))
    assert set(labels.tolist()) == {0, 1}


def test_fit_is_deterministic():
    x = np.random.default_rng(5).normal(size=(30, 4))
    a, sa = kmeans_fit(_embs(x), 3, seed=9)
    b, sb = kmeans_fit(_embs(x), 3, seed=9)
    assert a.centroids.tobytes() == b.centroids.tobytes() and sa == sb


def test_kmeans_round_trip(tmp_path):
    x = np.random.default_rng(6).normal(size=(20, 4))
    model, assignment = kmeans_fit(_embs(x), 3, seed=0)
    save_kmeans(tmp_path / "km.json", model, assignment, seed=0)
    back, assignment2, meta = load_kmeans(tmp_path / "km.json")
    assert assignment2 == assignment and meta["seed"] == 0
    for row in x:
        assert kmeans_predict(back, row.astype(np.float32)) == kmeans_predict(model, row.astype(np.float32))


def test_permuted_model_relabels():
    x, _ = blobs(15, 2, 9.0, seed=1)
    model, assignment = kmeans_fit(_embs(x), 3, seed=0)
    order = [2, 0, 1]
    perm = model.permuted(order)
    for e in _embs(x):
        assert order[kmeans_predict(perm, e)] == assignment[e.client_id]
