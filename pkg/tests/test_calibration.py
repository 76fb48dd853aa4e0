import itertools

import numpy as np
import pytest

from bisnn.calibration import (
    MAP, PredictionRecord, accuracy, expected_calibration_error, grid_points, network_outputs, nll,
    predict_ensemble, predict_map, predict_points, uncertainty_grid,
)
from bisnn.data import PopulationCodeSpec
from bisnn.network import CLASSIFICATION, REGRESSION, LayerSpec, Network
from bisnn.train_bayes import probabilities


def test_ece_perfectly_calibrated():
    # confidence 0.8 with exactly 80% correct
    probs = np.tile([0.8, 0.2], (10, 1))
    labels = np.array([0] * 8 + [1] * 2)
    assert expected_calibration_error((probs, labels)) == pytest.approx(0.0, abs=1e-15)


def test_ece_confident_half_wrong():
    probs = np.tile([1.0, 0.0], (4, 1))
    assert expected_calibration_error((probs, np.array([0, 1, 0, 1]))) == pytest.approx(0.5)


def test_ece_two_bin_fixture():
    probs = np.array([[0.9, 0.1], [0.9, 0.1], [0.4, 0.6], [0.3, 0.7]])
    labels = np.array([0, 1, 1, 1])
    # bin (0.5, 1]: all four, conf mean 0.775, acc 0.75
    assert expected_calibration_error((probs, labels), n_bins=2) == pytest.approx(0.025)
    three = np.array([[0.2, 0.3, 0.5], [0.6, 0.2, 0.2]])
    # bin1 (0.33, 0.67]: conf 0.5 wrong, conf 0.6 right -> |0.5 - 0.55|
    assert expected_calibration_error((three, np.array([0, 0])), n_bins=3) == pytest.approx(0.05)


def test_ece_bin_boundaries_are_right_closed():
    probs = np.array([[0.5, 0.5]])
    # 0.5 sits at the top of bin 0 for two bins, so the gap is |1 - 0.5|
    assert expected_calibration_error((probs, np.array([0])), n_bins=2) == 0.5


def test_ece_order_invariance_and_bounds():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(3), 200)
    labels = rng.integers(0, 3, 200)
    e = expected_calibration_error((probs, labels))
    perm = rng.permutation(200)
    assert expected_calibration_error((probs[perm], labels[perm])) == pytest.approx(e, abs=1e-15)
    assert 0.0 <= e <= 1.0
    with pytest.raises(ValueError):
        expected_calibration_error((np.zeros((0, 2)), np.zeros(0)))


def _net(readout=None):
    specs = [LayerSpec(4, 6, 2), LayerSpec(6, 3, 2)]
    return Network(specs, CLASSIFICATION, readout_seed=3, readouts=readout)


def _inputs(seed=0, B=5):
    return (np.random.default_rng(seed).random((30, B, 4)) < 0.5).astype(np.uint8)


def test_map_deterministic_and_binary():
    net = _net()
    logits = net.init_weights(np.random.default_rng(1), -1, 1)
    a = predict_map(net, logits, _inputs(), np.zeros(5, int))
    b = predict_map(net, logits, _inputs(), np.zeros(5, int))
    np.testing.assert_array_equal(a.probs, b.probs)
    np.testing.assert_allclose(a.probs.sum(1), 1.0)


def test_zero_readout_gives_uniform_probabilities():
    net = _net(readout=[np.zeros((2, 6)), np.zeros((2, 3))])
    logits = net.init_weights(np.random.default_rng(1))
    rec = predict_map(net, logits, _inputs(), np.array([0, 1, 0, 1, 0]))
    np.testing.assert_allclose(rec.probs, 0.5)
    assert nll(rec) == pytest.approx(np.log(2))


def test_saturated_single_member_equals_map():
    net = _net()
    signs = [np.random.default_rng(2).choice([-1.0, 1.0], s) for s in net.weight_shapes]
    logits = [40.0 * s for s in signs]
    x = _inputs()
    ens = predict_ensemble(net, logits, x, K=1, seed=7)
    np.testing.assert_array_equal(ens.probs, predict_map(net, logits, x).probs)


def test_ensemble_is_convex_combination_of_members():
    net = _net()
    logits = net.init_weights(np.random.default_rng(3), -0.5, 0.5)
    x = _inputs(B=3)
    ens = predict_ensemble(net, logits, x, K=4, seed=1)
    assert ens.predictor == "ensemble-4"
    assert np.all(ens.probs >= 0) and np.all(ens.probs <= 1)
    np.testing.assert_allclose(ens.probs.sum(1), 1.0)
    other = predict_ensemble(net, logits, x, K=4, seed=2)
    assert not np.allclose(other.probs, ens.probs)


def test_ensemble_converges_to_posterior_average():
    # 3 weights: enumerate all 8 networks and weight them by their posterior mass
    net = Network([LayerSpec(1, 3, 2, scale=1.0)], CLASSIFICATION, readout_seed=0)
    logits = [np.array([[0.4], [-0.8], [0.1]])]
    x = np.ones((40, 1, 1), dtype=np.uint8)
    exact = np.zeros(2)
    for cfg in itertools.product([1.0, -1.0], repeat=3):
        w = np.array(cfg).reshape(3, 1)
        q = np.prod(np.where(w > 0, probabilities(logits[0]), 1 - probabilities(logits[0])))
        exact += q * network_outputs(net, [w], x)[0]
    members = [network_outputs(net, [np.array(c).reshape(3, 1)], x)[0]
               for c in itertools.product([1.0, -1.0], repeat=3)]
    spread = np.max(np.std(members, axis=0))
    ens = predict_ensemble(net, logits, x, K=1000, seed=0)
    assert np.all(np.abs(ens.probs[0] - exact) <= 4 * spread / np.sqrt(1000) + 1e-12)


def test_regression_ensemble_reports_spread():
    net = Network([LayerSpec(3, 5, 1)], REGRESSION, readout_seed=0)
    logits = net.init_weights(np.random.default_rng(0), -0.3, 0.3)
    x = (np.random.default_rng(1).random((20, 4, 3)) < 0.6).astype(np.uint8)
    rec = predict_ensemble(net, logits, x, K=6, seed=0)
    assert rec.mean.shape == (4, 1) and np.all(rec.std >= 0)


def test_accuracy_helper():
    rec = PredictionRecord(np.array([0, 1, 1]), MAP, probs=np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]))
    assert accuracy(rec) == pytest.approx(2 / 3)


def test_grid_layout():
    pts = grid_points((0, 1, 10, 12), 3)
    assert pts.shape == (9, 2)
    np.testing.assert_allclose(pts[:3, 1], 10.0)
    np.testing.assert_allclose(pts[:3, 0], [0, 0.5, 1])


def test_uncertainty_grid_matches_pointwise_prediction():
    spec = PopulationCodeSpec(n_units=3, input_range=(-1, 1), T=20)
    net = Network.build(6, [5], 2, CLASSIFICATION, readout_seed=4)
    logits = net.init_weights(np.random.default_rng(0), -1, 1)
    pts, p1 = uncertainty_grid(net, logits, (-1, 1, -1, 1), 4, spec, encoding_seed=3)
    assert pts.shape == (16, 2) and p1.shape == (16,)
    direct = predict_points(net, logits, pts, spec, 3)
    np.testing.assert_array_equal(direct.probs[:, 1], p1)


def test_identical_readout_rows_give_even_odds():
    spec = PopulationCodeSpec(n_units=3, input_range=(-1, 1), T=20)
    net = Network.build(6, [5], 2, CLASSIFICATION, readout_seed=4,
                        readouts=[np.zeros((2, 5)), np.array([[1.0] * 5, [1.0] * 5])])
    logits = [np.zeros(s) for s in net.weight_shapes]
    _, p1 = uncertainty_grid(net, logits, (-1, 1, -1, 1), 3, spec, predictor="ensemble", K=5)
    np.testing.assert_allclose(p1, 0.5)


def test_uncertainty_grid_requires_two_classes():
    net = Network.build(6, [5], 3, CLASSIFICATION)
    with pytest.raises(ValueError):
        uncertainty_grid(net, [np.zeros(s) for s in net.weight_shapes], (0, 1, 0, 1), 2,
                         PopulationCodeSpec(n_units=3))
