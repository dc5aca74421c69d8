import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterfl.data import ClientDataset, ImageDataset, partition_pathological
from clusterfl.embedding import (
    ClientEmbedding,
    StatisticsConfig,
    embedding_statistics,
    load_embeddings,
    repa_embed,
    save_embeddings,
    wd_embed,
)
from clusterfl.errors import CapabilityError, ConfigurationError, InputError
from clusterfl.nn import NetworkSpec, init_params

FULL = StatisticsConfig(True, True, (0.25, 0.5, 0.75))


def _client(ds, cid=0, role="training"):
    if role == "holdout":
        return ClientDataset(cid, "holdout", None, ds)
    return ClientDataset(cid, "training", ds, ds)


def test_statistics_config_invariants():
    with pytest.raises(ConfigurationError):
        StatisticsConfig(False, False, ())
    with pytest.raises(ConfigurationError):
        StatisticsConfig(True, False, (0.5, 0.25))
    with pytest.raises(ConfigurationError):
        StatisticsConfig(True, False, (0.0, 0.5))
    assert FULL.n_statistics == 5


def test_single_point():
    p = np.array([[1.5, -2.0, 3.0]])
    out = embedding_statistics(p, FULL).reshape(5, 3)
    np.testing.assert_array_equal(out[0], p[0])
    np.testing.assert_array_equal(out[1], 0)
    for q in out[2:]:
        np.testing.assert_array_equal(q, p[0])


def test_median_interpolates():
    out = embedding_statistics(np.array([[0.0], [1.0]]), StatisticsConfig(False, False, (0.5,)))
    assert out.tolist() == [0.5]


def test_quantile_type7_by_hand():
    # type 7: position h = (n - 1) q, linear between order statistics
    x = np.array([3.0, 1.0, 4.0, 1.0, 5.0])
    s = np.sort(x)
    expected = []
    for q in (0.25, 0.5, 0.75):
        h = (len(s) - 1) * q
        lo = int(np.floor(h))
        expected.append(s[lo] + (h - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo]))
    out = embedding_statistics(x[:, None], StatisticsConfig(False, False, (0.25, 0.5, 0.75)))
    np.testing.assert_allclose(out, expected)


def test_std_is_population():
    x = np.array([[1.0], [3.0]])
    assert embedding_statistics(x, StatisticsConfig(False, True, ())).tolist() == [1.0]


def test_law_of_large_numbers():
    pts = np.random.default_rng(0).standard_normal((1000, 6))
    out = embedding_statistics(pts, StatisticsConfig(True, True, ())).reshape(2, 6)
    assert np.all(np.abs(out[0]) < 0.1) and np.all(np.abs(out[1] - 1) < 0.1)


def test_empty_points():
    with pytest.raises(InputError):
        embedding_statistics(np.zeros((0, 3)), FULL)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 40), dup=st.integers(2, 4))
def test_multiset_invariance(seed, n, dup):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    base = embedding_statistics(pts, FULL).reshape(5, 3)
    shuffled = embedding_statistics(pts[rng.permutation(n)], FULL).reshape(5, 3)
    np.testing.assert_allclose(shuffled, base, rtol=1e-12, atol=1e-12)
    repeated = embedding_statistics(np.repeat(pts, dup, axis=0), FULL).reshape(5, 3)
    np.testing.assert_allclose(repeated[0], base[0], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(repeated[1], base[1], rtol=1e-9, atol=1e-12)
    # Linear-interpolation quantiles are not exactly duplication invariant ({0, 1} has
    # q25 = 0.25, {0, 0, 1, 1} has q25 = 0). Both positions, (n - 1) q and (m n - 1) q / m
    # in original units, fall in [n q - 1, n q], so both values share one order-statistic bracket.
    s = np.sort(pts, axis=0)
    for row, q in zip(range(2, 5), FULL.quantiles):
        lo, hi = max(int(np.floor(n * q)) - 1, 0), min(int(np.ceil(n * q)), n - 1)
        for values in (base[row], repeated[row]):
            assert np.all(values >= s[lo] - 1e-12) and np.all(values <= s[hi] + 1e-12)


def test_quantiles_of_duplicates_differ_by_design():
    cfg = StatisticsConfig(False, False, (0.25,))
    assert embedding_statistics(np.array([[0.0], [1.0]]), cfg).tolist() == [0.25]
    assert embedding_statistics(np.array([[0.0], [0.0], [1.0], [1.0]]), cfg).tolist() == [0.0]


def test_duplication_keeps_mean_and_median_of_odd_sample(tiny_spec, small_pool):
    params = init_params(tiny_spec, 0)
    ds = small_pool.subset(np.arange(21))
    twice = small_pool.subset(np.concatenate([np.arange(21)] * 3))
    cfg = StatisticsConfig(True, False, (0.5,))
    a = repa_embed(params, tiny_spec, _client(ds), cfg).vector
    b = repa_embed(params, tiny_spec, _client(twice), cfg).vector
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-7)


def test_repa_permutation_and_identity(tiny_spec, small_pool):
    params = init_params(tiny_spec, 0)
    ds = small_pool.subset(np.arange(50))
    perm = small_pool.subset(np.random.default_rng(1).permutation(50))
    a = repa_embed(params, tiny_spec, _client(ds, 0), FULL)
    b = repa_embed(params, tiny_spec, _client(perm, 1), FULL)
    c = repa_embed(params, tiny_spec, _client(ds, 2), FULL)
    np.testing.assert_allclose(a.vector, b.vector, rtol=1e-6, atol=1e-7)
    assert a.vector.tobytes() == c.vector.tobytes()
    assert a.dim == tiny_spec.embedding_dim * FULL.n_statistics and a.method == "REPA"


def test_repa_is_label_and_training_free(tiny_spec, small_pool):
    params = init_params(tiny_spec, 0)
    before = params.values.copy()
    client = partition_pathological(small_pool, 5, seed=0)[2]
    a = repa_embed(params, tiny_spec, client)
    b = repa_embed(params, tiny_spec, client.without_labels())
    assert a.vector.tobytes() == b.vector.tobytes()
    assert np.array_equal(params.values, before)


def test_repa_holdout_uses_validation(tiny_spec, small_pool):
    params = init_params(tiny_spec, 0)
    ds = small_pool.subset(np.arange(30))
    ho = ClientDataset(9, "holdout", None, ds)
    assert repa_embed(params, tiny_spec, ho).vector.tobytes() == repa_embed(params, tiny_spec, _client(ds)).vector.tobytes()


def test_wd_examples(tiny_spec, small_pool):
    params = init_params(tiny_spec, 3)
    client = _client(small_pool.subset(np.arange(40)))
    zero = wd_embed(params, tiny_spec, client, 1, 0.0, 8, seed=0)
    assert np.all(zero.vector == 0) and zero.dim == params.size and zero.method == "WD"
    f1 = wd_embed(params, tiny_spec, client, 1, 0.1, 8, seed=0)
    f2 = wd_embed(params, tiny_spec, client, 2, 0.1, 8, seed=0)
    assert not np.allclose(f1.vector, f2.vector)
    with pytest.raises(CapabilityError):
        wd_embed(params, tiny_spec, _client(small_pool.subset(np.arange(10)), role="holdout"), 1, 0.1, 8, 0)


def test_embedding_must_be_finite():
    with pytest.raises(InputError):
        ClientEmbedding(0, "REPA", np.array([1.0, np.nan]))


def test_embeddings_round_trip(tmp_path):
    embs = [ClientEmbedding(i, "REPA", np.arange(4) * i) for i in range(3)]
    save_embeddings(tmp_path / "e.json", embs, note="x")
    back, meta = load_embeddings(tmp_path / "e.json")
    assert [e.client_id for e in back] == [0, 1, 2] and meta["dim"] == 4 and meta["note"] == "x"
    assert all(a.vector.tobytes() == b.vector.tobytes() for a, b in zip(embs, back))


def test_network_mode_does_not_change_dim(small_pool):
    for mode in ("CLF", "AE", "SAE"):
        spec = NetworkSpec((8, 8, 1), 6, 10, mode, 1.0, (2, 3))
        e = repa_embed(init_params(spec, 0), spec, _client(small_pool.subset(np.arange(10))))
        assert e.dim == 6 * 4
    assert isinstance(small_pool, ImageDataset)
