import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterfl.errors import ConfigurationError, InputError, InternalError
from clusterfl.nn import (
    ModelParameters,
    NetworkSpec,
    backward,
    forward,
    init_params,
    load_params,
    loss,
    param_layout,
    save_params,
    sgd_step,
    train_local,
)
from oracles import finite_difference_check


def test_init_is_deterministic(tiny_spec):
    a, b = init_params(tiny_spec, 7), init_params(tiny_spec, 7)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.dtype == np.float32
    assert init_params(tiny_spec, 8).values.tobytes() != a.values.tobytes()


def test_biases_start_at_zero(tiny_spec):
    for name, arr in init_params(tiny_spec, 0).arrays().items():
        if name.endswith(".b"):
            assert np.all(arr == 0.0)


def test_glorot_bounds():
    spec = NetworkSpec((8, 8, 1), 16, 10, "SAE")
    arrays = init_params(spec, 3).arrays()
    w = arrays["enc.fc.w"]
    bound = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.9 * bound
    conv = arrays["enc.conv2.w"]
    bound = np.sqrt(6.0 / (9 * conv.shape[2] + 9 * conv.shape[3]))
    assert np.abs(conv).max() <= bound


def test_invalid_spec():
    with pytest.raises(ConfigurationError):
        NetworkSpec((28, 28, 1), 0)
    with pytest.raises(ConfigurationError):
        NetworkSpec((28, 28, 1), 4, head_mode="VAE")
    with pytest.raises(ConfigurationError):
        NetworkSpec((10, 10, 1), 4)


def test_default_parameter_count():
    # hand count: conv(k*k*cin*cout + cout), dense(in*out + out); 28 -> 14 -> 7 after two pools
    conv1 = 3 * 3 * 1 * 16 + 16
    conv2 = 3 * 3 * 16 * 32 + 32
    flat = 7 * 7 * 32
    enc_fc = flat * 32 + 32
    clf = 32 * 10 + 10
    dec_fc = 32 * flat + flat
    dec1 = 3 * 3 * 32 * 16 + 16
    dec2 = 3 * 3 * 16 * 1 + 1
    expected = conv1 + conv2 + enc_fc + clf + dec_fc + dec1 + dec2
    assert expected == 111851
    assert init_params(NetworkSpec(), 0).size == expected
    assert init_params(NetworkSpec(head_mode="CLF"), 0).size == conv1 + conv2 + enc_fc + clf


def test_head_modes_shape_the_layout():
    names = lambda mode: {n for n, _ in param_layout(NetworkSpec((8, 8, 1), 4, head_mode=mode))}  # noqa: E731
    assert not any(n.startswith("dec.") for n in names("CLF"))
    assert not any(n.startswith("clf.") for n in names("AE"))
    assert any(n.startswith("dec.") for n in names("SAE")) and "clf.w" in names("SAE")


def test_forward_shapes(tiny_spec, toy_set):
    params = init_params(tiny_spec, 0)
    out = forward(params, tiny_spec, toy_set.images[:5])
    assert out.embeddings.shape == (5, 4)
    assert out.class_probs.shape == (5, 10)
    assert out.reconstruction.shape == (5, 8, 8, 1)
    clf = tiny_spec.with_head("CLF")
    out = forward(init_params(clf, 0), clf, toy_set.images[:5])
    assert out.reconstruction is None
    ae = tiny_spec.with_head("AE")
    assert forward(init_params(ae, 0), ae, toy_set.images[:5]).class_probs is None


def test_zero_classifier_is_uniform(tiny_spec, toy_set):
    params = init_params(tiny_spec, 0)
    arrays = {k: v.copy() for k, v in params.arrays().items()}
    arrays["clf.w"][:] = 0
    values = np.concatenate([arrays[n].ravel() for n, _ in params.layout])
    probs = forward(params.with_values(values), tiny_spec, toy_set.images[:6]).class_probs
    np.testing.assert_allclose(probs, 0.1, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 6))
def test_softmax_rows_are_distributions(seed, n):
    spec = NetworkSpec((8, 8, 1), 4, 10, "SAE", 1.0, (2, 3))
    x = np.random.default_rng(seed).uniform(0, 1, (n, 8, 8, 1)).astype(np.float32)
    out = forward(init_params(spec, seed), spec, x)
    np.testing.assert_allclose(out.class_probs.sum(axis=1), 1.0, atol=1e-6)
    assert out.class_probs.min() >= 1e-12 and out.class_probs.max() <= 1
    assert all(np.isfinite(a).all() for a in out)


def test_forward_is_batch_independent(tiny_spec, toy_set):
    params = init_params(tiny_spec, 1)
    one = forward(params, tiny_spec, toy_set.images[:1])
    two = forward(params, tiny_spec, toy_set.images[:2])
    for a, b in zip(one, two):
        np.testing.assert_allclose(a[0], b[0], rtol=1e-6, atol=1e-7)


def test_forward_rejects_bad_shape(tiny_spec):
    with pytest.raises(InputError):
        forward(init_params(tiny_spec, 0), tiny_spec, np.zeros((2, 9, 8, 1), np.float32))
    with pytest.raises(InputError):
        forward(init_params(tiny_spec.with_head("CLF"), 0), tiny_spec, np.zeros((2, 8, 8, 1), np.float32))


def test_loss_examples(tiny_spec, toy_set):
    x = toy_set.images[:3]
    labels = np.array([1, 0, 2])
    probs = np.eye(10)[labels]
    clf = tiny_spec.with_head("CLF")
    from clusterfl.nn import ForwardOutput
    assert loss(clf, ForwardOutput(None, probs, None), labels, x) == 0.0
    ae = tiny_spec.with_head("AE")
    assert loss(ae, ForwardOutput(None, None, x.copy()), None, x) == 0.0
    out = forward(init_params(tiny_spec, 0), tiny_spec, x)
    sae0 = NetworkSpec((8, 8, 1), 4, 10, "SAE", 0.0, (2, 3))
    assert loss(sae0, out, labels, x) == loss(clf, out, labels, x)
    assert loss(tiny_spec, out, labels, x) >= 0
    with pytest.raises(InputError):
        loss(tiny_spec, out, None, x)


def test_cross_entropy_floor(tiny_spec):
    from clusterfl.nn import ForwardOutput
    clf = tiny_spec.with_head("CLF")
    probs = np.eye(10)[[0]]
    assert loss(clf, ForwardOutput(None, probs, None), np.array([1]), None) == pytest.approx(-np.log(1e-12))


@pytest.mark.parametrize("mode", ["CLF", "AE", "SAE"])
def test_gradients_match_finite_differences(mode, toy_set):
    spec = NetworkSpec((8, 8, 1), 4, 10, mode, 0.7, (2, 3))
    params = init_params(spec, 11)
    x = toy_set.images[:4]
    labels = toy_set.labels[:4] if spec.has_classifier else None
    res = finite_difference_check(params, spec, x, labels)
    assert res["smooth_fail"] == 0, res
    assert res["kink_fail"] == 0, res
    assert res["smooth"] > 0.9 * res["n"]


def test_gradient_layout_matches(tiny_spec, toy_set):
    params = init_params(tiny_spec.with_head("CLF"), 0)
    _, g = backward(params, tiny_spec.with_head("CLF"), toy_set.images[:4], toy_set.labels[:4])
    assert g.layout == params.layout
    assert not any(n.startswith("dec.") for n, _ in g.layout)


def test_duplicating_the_batch_keeps_gradients(tiny_spec, toy_set):
    params = init_params(tiny_spec, 2).astype(np.float64)
    x, y = toy_set.images[:4].astype(np.float64), toy_set.labels[:4]
    l1, g1 = backward(params, tiny_spec, x, y)
    l2, g2 = backward(params, tiny_spec, np.concatenate([x, x]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1.values, g2.values, rtol=1e-10, atol=1e-14)


def test_backward_is_deterministic(tiny_spec, toy_set):
    params = init_params(tiny_spec, 2)
    a = backward(params, tiny_spec, toy_set.images[:8], toy_set.labels[:8])[1]
    b = backward(params, tiny_spec, toy_set.images[:8], toy_set.labels[:8])[1]
    assert a.values.tobytes() == b.values.tobytes()


def test_sgd_step_examples():
    layout = (("w", (2,)),)
    p = ModelParameters(np.array([1.0, 2.0]), layout)
    g = ModelParameters(np.array([0.5, -1.0]), layout)
    np.testing.assert_allclose(sgd_step(p, g, 0.1).values, [0.95, 2.1])
    assert np.array_equal(sgd_step(p, g, 0.0).values, p.values)
    assert np.array_equal(sgd_step(p, ModelParameters(np.zeros(2), layout), 0.3).values, p.values)
    with pytest.raises(InternalError):
        sgd_step(p, ModelParameters(np.zeros(2), (("v", (2,)),)), 0.1)


def test_prox_with_zero_mu_is_plain_training(tiny_spec, toy_set):
    params = init_params(tiny_spec, 4)
    plain = train_local(params, tiny_spec, toy_set, 2, 0.05, 16, seed=3)
    prox = train_local(params, tiny_spec, toy_set, 2, 0.05, 16, prox=(0.0, params), seed=3)
    assert plain.values.tobytes() == prox.values.tobytes()


def test_huge_mu_pins_to_anchor(tiny_spec, toy_set):
    params = init_params(tiny_spec, 4)
    out = train_local(params, tiny_spec, toy_set, 1, 1e-6, 16, prox=(1e6, params), seed=0)
    assert np.linalg.norm(out.values.astype(np.float64) - params.values) < 1e-3


def test_prox_gradient_is_mu_times_offset(tiny_spec, toy_set):
    # one full-batch step: theta' = theta - lr * (g + mu (theta - anchor))
    spec = tiny_spec.with_head("CLF")
    anchor = init_params(spec, 1).astype(np.float64)
    theta = init_params(spec, 2).astype(np.float64)
    mu, lr = 0.3, 0.5
    data = toy_set.subset(np.arange(8))
    from clusterfl.data import ImageDataset
    data = ImageDataset(data.images.astype(np.float64), data.labels, 10)
    stepped = train_local(theta, spec, data, 1, lr, 8, prox=(mu, anchor), seed=0)
    _, g = backward(theta, spec, data.images, data.labels)
    implied = (theta.values - stepped.values) / lr - g.values

    def penalty(v):
        return 0.5 * mu * np.sum((v - anchor.values) ** 2)

    h = 1e-4
    fd = np.array([(penalty(theta.values + h * e) - penalty(theta.values - h * e)) / (2 * h)
                   for e in np.eye(theta.size)[:200]])
    np.testing.assert_allclose(implied[:200], fd, rtol=1e-6, atol=1e-9)


def test_training_loss_decreases(toy_set):
    spec = NetworkSpec((8, 8, 1), 8, 10, "CLF", 1.0, (4, 8))
    params = init_params(spec, 0)
    losses = []
    for epoch in range(5):
        full = loss(spec, forward(params, spec, toy_set.images), toy_set.labels, toy_set.images)
        losses.append(full)
        params = train_local(params, spec, toy_set, 1, 0.01, 64, seed=epoch)
    assert all(b <= a for a, b in zip(losses, losses[1:])), losses


def test_train_local_is_deterministic(tiny_spec, toy_set):
    params = init_params(tiny_spec, 4)
    a = train_local(params, tiny_spec, toy_set, 1, 0.05, 8, prox=(0.1, params), seed=9)
    b = train_local(params, tiny_spec, toy_set, 1, 0.05, 8, prox=(0.1, params), seed=9)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.isfinite(a.values).all()


def test_unlabeled_data_needs_an_unsupervised_head(tiny_spec, toy_set):
    with pytest.raises(InputError):
        train_local(init_params(tiny_spec, 0), tiny_spec, toy_set.without_labels(), 1, 0.1, 8)
    ae = tiny_spec.with_head("AE")
    train_local(init_params(ae, 0), ae, toy_set.without_labels(), 1, 0.1, 8)


def test_params_round_trip(tmp_path, tiny_spec):
    params = init_params(tiny_spec, 5)
    save_params(tmp_path / "m.json", params, tiny_spec, seed=5)
    back, spec, prov = load_params(tmp_path / "m.json")
    assert back.values.tobytes() == params.values.tobytes()
    assert back.layout == params.layout and spec == tiny_spec and prov == {"seed": 5}
    raw = (tmp_path / "m.f32").read_bytes()
    assert raw == params.values.astype("<f4").tobytes()
