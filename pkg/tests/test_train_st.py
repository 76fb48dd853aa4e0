import numpy as np
import pytest

from bisnn.data import PopulationCodeSpec, encode_dataset, gen_two_moons
from bisnn.network import CLASSIFICATION, Network
from bisnn.train_st import binarize, st_step, st_update


def test_binarize_sign_convention():
    assert binarize(np.array(0.0)) == 1.0
    np.testing.assert_array_equal(binarize(np.array([-0.3, 0.7])), [-1.0, 1.0])
    w = np.array([[1.0, -1.0], [-1.0, 1.0]])
    np.testing.assert_array_equal(binarize(binarize(w)), w)
    assert isinstance(binarize([w, w]), list)


def _net():
    return Network.build(4, [5], 2, CLASSIFICATION, readout_seed=1)


def test_zero_gradient_keeps_weights():
    net = _net()
    w = net.init_weights(np.random.default_rng(0))
    new, _ = st_step(w, np.zeros((10, 3, 4), dtype=np.uint8), np.array([0, 1, 0]), 0.5, net)
    for a, b in zip(new, w):
        np.testing.assert_array_equal(a, b)


def test_sgd_update_arithmetic():
    (new,) = st_update([np.array([[0.3]])], [np.array([[2.0]])], 0.1)
    assert new[0, 0] == pytest.approx(0.3 - 0.2)
    (clipped,) = st_update([np.array([[0.95]])], [np.array([[-2.0]])], 0.1, clip=1.0)
    assert clipped[0, 0] == 1.0


def test_step_uses_gradient_at_binarized_point():
    net = _net()
    rng = np.random.default_rng(2)
    w = net.init_weights(rng)
    x = (rng.random((30, 4, 4)) < 0.5).astype(np.uint8)
    y = np.array([0, 1, 1, 0])
    _, grads, _ = net.loss_and_gradient(binarize(w), x, y)
    new, _ = st_step(w, x, y, 0.1, net)
    for a, b, g in zip(new, w, grads):
        np.testing.assert_allclose(a, b - 0.1 * g / 4, rtol=0, atol=1e-15)


def test_forward_only_sees_binary_weights(monkeypatch):
    net = _net()
    seen = []
    original = net.forward_sequence

    def spy(weights, inputs):
        seen.extend(weights)
        return original(weights, inputs)

    monkeypatch.setattr(net, "forward_sequence", spy)
    rng = np.random.default_rng(3)
    w = net.init_weights(rng)
    for _ in range(3):
        w, _ = st_step(w, (rng.random((20, 2, 4)) < 0.5).astype(np.uint8), np.array([0, 1]), 0.3, net)
    assert seen and all(set(np.unique(m)) <= {-1.0, 1.0} for m in seen)


def test_zero_learning_rate_fixed_point():
    net = _net()
    rng = np.random.default_rng(4)
    w = net.init_weights(rng)
    new, _ = st_step(w, (rng.random((20, 2, 4)) < 0.5).astype(np.uint8), np.array([0, 1]), 0.0, net)
    for a, b in zip(new, w):
        np.testing.assert_array_equal(a, b)


def test_non_finite_gradient_aborts(monkeypatch):
    net = _net()
    w = net.init_weights(np.random.default_rng(0))
    monkeypatch.setattr(net, "loss_and_gradient",
                        lambda *a: (np.zeros(1), [np.full(s, np.nan) for s in net.weight_shapes], None))
    with pytest.raises(FloatingPointError, match="non-finite gradient"):
        st_step(w, np.ones((5, 1, 4), dtype=np.uint8), np.array([0]), 0.1, net)


def test_two_moons_short_run_fits():
    spec = PopulationCodeSpec(n_units=10, input_range=(-1.5, 2.5))
    pts, labels = gen_two_moons(200, 0.1, 0)
    ds = encode_dataset(pts, labels, spec, 0, CLASSIFICATION)
    net = Network.build(20, [64, 64], 2, CLASSIFICATION)
    rng = np.random.default_rng(0)
    w = net.init_weights(rng)
    for _ in range(25):
        perm = rng.permutation(ds.n_examples)
        for start in range(0, ds.n_examples, 32):
            x, y = ds.batch(perm[start : start + 32])
            w, _ = st_step(w, x, y, 0.05, net)
    x, y = ds.batch(np.arange(ds.n_examples))
    out = net.predict_outputs(binarize(w), x)
    probs = np.exp(out - out.max(-1, keepdims=True))
    probs = (probs / probs.sum(-1, keepdims=True)).mean(0)
    assert np.mean(probs.argmax(1) == y) >= 0.95
